"""
Hiding SSD and PCIe behind compute during training
==================================================

Before layer ``j`` runs, its dense weights are gathered over NVLink and
each routed expert block is read from SSD (unless the CPU cache has it)
and copied to the GPU. Issuing layer ``j + 1``'s fetches as soon as layer
``j`` starts computing hides them, as long as a fetch is shorter than a
layer.
"""
from moesim import CacheParams, MachineSpec, ModelSpec, Topology, gen_trace, run_2d_schedule

model = ModelSpec(dense_params=10**7, sparse_params=8 * 10**6, moe_layers=4, activation_prob=0.25)
machine = MachineSpec(nodes=1, gpus_per_node=2, gpu_bytes=80 * 10**9, cpu_bytes=5 * 10**11,
                      ssd_bytes=4 * 10**12)
topo = Topology(1, 1, 2)
trace = gen_trace(seed=7, steps=3, ranks=2, experts=8, tokens_per_rank=64, skew=1.2)

for compute_ms in (1, 5, 40):
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(cpu_size=4, beta=0.5, k=2),
                          compute_ns=compute_ms * 1_000_000)
    print(f"{compute_ms:2d} ms layers: makespan {res.timeline.makespan / 1e6:7.2f} ms, "
          f"first-layer wait {res.exposed_stall / 1e6:5.2f} ms, "
          f"later waits {res.steady_stall / 1e6:6.2f} ms")

print(res.outcome_counts())
