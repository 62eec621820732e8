"""
Where do the parameters live?
=============================

Sizing GPU, CPU and SSD for a sparse model whose expert weights dwarf its
dense core. Each node keeps the dense training state on GPU, a slice of
the activated experts in CPU memory and every expert's optimizer state on
SSD.
"""
from moesim import MachineSpec, ModelSpec, check_feasibility, total_params

# A 1B dense core with 1T of experts spread over 24 MoE layers, of which
# roughly one in ten is touched per step.
model = ModelSpec(dense_params=10**9, sparse_params=10**12, moe_layers=24, activation_prob=0.1)
print(f"total parameters: {total_params(model):,}")

# Five nodes, each with 8x80 GB of HBM, 2 TB of DRAM and 16 TB of flash.
machine = MachineSpec(nodes=5, gpus_per_node=8, gpu_bytes=640 * 10**9,
                      cpu_bytes=2 * 10**12, ssd_bytes=16 * 10**12)
report = check_feasibility(model, machine)
for tier in ("gpu", "cpu", "ssd"):
    d, c = report.demand[tier], report.capacity[tier]
    print(f"{tier}: need {d / 1e12:8.3f} TB, have {c / 1e12:8.3f} TB  ({d / c:6.1%} used)")
print("fits" if report.ok else f"does not fit: {report.failing_tiers}")

# Growing the expert count tenfold blows through CPU and SSD long before HBM.
bigger = ModelSpec(dense_params=10**9, sparse_params=10**13, moe_layers=24, activation_prob=0.1)
print("10x experts:", check_feasibility(bigger, machine).failing_tiers)

# Smallest node count that holds the bigger model.
nodes = 1
while not check_feasibility(bigger, MachineSpec(nodes, 640 * 10**9, 2 * 10**12,
                                                16 * 10**12)).ok:
    nodes += 1
print("nodes needed for 10x experts:", nodes)
