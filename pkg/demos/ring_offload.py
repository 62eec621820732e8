"""
Serving with a ring of expert slots
===================================

During inference only ``K`` layers' experts need to sit on the GPU. While
layer ``i`` computes, the copy engine streams layer ``i + 1`` into the next
free slot; when a layer finishes, its slot is recycled for layer ``i + K``.
If a copy is shorter than a layer's compute, only the very first copy
shows up in the latency.
"""
from moesim import RingPlan, Topology, ring_simulate

topo = Topology(1, 1, 1)  # default PCIe: 25 GB/s
expert_bytes = 200 * 10**6  # 8 ms per copy at 25 GB/s
for slots in (1, 2, 4, 24):
    plan = RingPlan(num_layers=24, ring_slots=slots, expert_bytes=expert_bytes,
                    dense_bytes=480 * 10**6, compute_ns=10_000_000)
    res = ring_simulate(plan, topo)
    print(f"K={slots:2d}: makespan {res.makespan / 1e6:7.2f} ms "
          f"(compute {res.compute_total_ns / 1e6:.0f} ms), "
          f"peak {res.peak_gpu_bytes / 1e9:5.2f} GB, saved {res.memory_reduction:5.1%}")

