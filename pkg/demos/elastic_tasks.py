"""
Balancing uneven tasks in multi-task training
=============================================

Tasks that train in lock-step wait for the slowest one. Giving a heavy
task more data-parallel GPUs shortens its share; packing light tasks onto
one GPU frees cards for someone else.
"""
from moesim import (TaskAssignment, balance_scale_down, balance_scale_up, max_load,
                    simulate_multitask)

batches = (512, 256, 128, 128)

plan = balance_scale_up(batches, gpu_budget=8)
print("GPUs per task:", plan.gpus_per_task, " max per-GPU load:", max_load(batches, plan.gpus_per_task))

one_each = simulate_multitask(TaskAssignment((1, 1, 1, 1)), batches, per_sample_ns=1_000_000)
balanced = simulate_multitask(plan, batches, per_sample_ns=1_000_000, dense_bytes=10**8)
print(f"one GPU per task: {one_each.per_card_throughput:7.1f} samples/s per card")
print(f"balanced        : {balanced.per_card_throughput:7.1f} samples/s per card "
      f"(incl. {balanced.sync_ns / 1e6:.1f} ms weight sync)")

# With a card that can hold 512 samples' worth of work, the three light
# tasks share a GPU.
packed = balance_scale_down(batches, per_gpu_capacity=512)
print("packed groups:", packed.groups)
