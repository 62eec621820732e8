"""
Two-phase AlltoAll on a rail-optimized fat tree
================================================

A flat AlltoAll sends every block straight to its destination, so blocks
between GPUs on different rails climb to the spine. The hierarchical
version first shuffles blocks inside each node over NVLink so that each
GPU holds everything bound for its own rail, then exchanges along the rail
only. Both deliver identical data.
"""
import numpy as np

from moesim import (Engine, Topology, alltoall_flat, alltoall_hierarchical, flat_transfers,
                    hierarchical_transfers, lower_transfers, spin_hops)

topo = Topology(clusters=1, nodes_per_cluster=4, gpus_per_node=4)
n = topo.num_gpus
rng = np.random.default_rng(0)
payload = [[rng.integers(0, 256, 1 << 16, dtype=np.uint8).tobytes() for _ in range(n)]
           for _ in range(n)]

assert alltoall_hierarchical(payload, topo) == alltoall_flat(payload)
print(f"{n} ranks: hierarchical result equals the flat transpose")

for label, log in [("flat", flat_transfers(payload, topo)),
                   ("hierarchical", hierarchical_transfers(payload, topo))]:
    engine = Engine(topo)
    lower_transfers(engine, log)
    tl = engine.run()
    print(f"{label:>12}: {len(log):3d} transfers, {spin_hops(log):3d} spine crossings, "
          f"makespan {tl.makespan / 1e3:8.1f} us")
