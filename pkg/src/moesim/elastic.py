"""GPU-per-task planning for imbalanced multi-task MoE training.

Scale-up gives heavy tasks more data-parallel GPUs; scale-down packs light
tasks onto shared GPUs. Either way a synchronous step lasts as long as the
slowest GPU, so the objective is the largest per-GPU load.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .engine import Engine, Timeline
from .topology import SAME_RAIL, Topology, transfer_ns


@dataclass(frozen=True)
class TaskAssignment:
    """Scale-up sets ``gpus_per_task``; scale-down sets ``groups`` (task ids per GPU)."""

    gpus_per_task: tuple | None = None
    groups: tuple | None = None

    @property
    def total_gpus(self) -> int:
        if self.gpus_per_task is not None:
            return sum(self.gpus_per_task)
        return len(self.groups)

    def to_dict(self) -> dict:
        if self.gpus_per_task is not None:
            return {"gpus_per_task": list(self.gpus_per_task)}
        return {"groups": [list(g) for g in self.groups]}


def _heavier(a_batch, a_gpus, b_batch, b_gpus) -> bool:
    return a_batch * b_gpus > b_batch * a_gpus


def balance_scale_up(batch_sizes: Sequence[int], gpu_budget: int) -> TaskAssignment:
    """Water-filling: hand each spare GPU to the task with the largest per-GPU load."""
    n = len(batch_sizes)
    if n == 0:
        raise ValueError("no tasks")
    if gpu_budget < n:
        raise ValueError(f"budget of {gpu_budget} GPUs cannot cover {n} tasks")
    gpus = [1] * n
    for _ in range(gpu_budget - n):
        best = 0
        for t in range(1, n):
            if _heavier(batch_sizes[t], gpus[t], batch_sizes[best], gpus[best]):
                best = t
        gpus[best] += 1
    return TaskAssignment(gpus_per_task=tuple(gpus))


def max_load(batch_sizes: Sequence[int], gpus: Sequence[int]) -> float:
    return max(b / g for b, g in zip(batch_sizes, gpus))


def balance_scale_down(task_loads: Sequence[int], per_gpu_capacity: int) -> TaskAssignment:
    """First-fit decreasing; ties in load keep task order."""
    for t, load in enumerate(task_loads):
        if load > per_gpu_capacity:
            raise ValueError(f"task {t} load {load} exceeds GPU capacity {per_gpu_capacity}")
    order = sorted(range(len(task_loads)), key=lambda t: -task_loads[t])
    bins: list[list[int]] = []
    used: list[int] = []
    for t in order:
        for b, level in enumerate(used):
            if level + task_loads[t] <= per_gpu_capacity:
                bins[b].append(t)
                used[b] += task_loads[t]
                break
        else:
            bins.append([t])
            used.append(task_loads[t])
    return TaskAssignment(groups=tuple(tuple(b) for b in bins))


@dataclass
class MultitaskResult:
    timeline: Timeline
    step_ns: int
    sync_ns: int
    total_gpus: int
    samples: int

    @property
    def per_card_throughput(self) -> float:
        """Samples per second per GPU."""
        return self.samples / (self.step_ns * 1e-9 * self.total_gpus)

    @property
    def total_throughput(self) -> float:
        return self.samples / (self.step_ns * 1e-9)

    def to_dict(self) -> dict:
        return {
            "step_ns": self.step_ns,
            "sync_ns": self.sync_ns,
            "gpus": self.total_gpus,
            "samples_per_step": self.samples,
            "per_card_samples_per_s": round(self.per_card_throughput, 6),
            "total_samples_per_s": round(self.total_throughput, 6),
        }


def default_sync_ns(assignment: TaskAssignment, dense_bytes: int, topology: Topology) -> int:
    """Ring AllReduce of the dense weights over a rail, for the widest data-parallel task."""
    if not assignment.gpus_per_task or dense_bytes == 0:
        return 0
    widest = max(assignment.gpus_per_task)
    if widest == 1:
        return 0
    return transfer_ns(topology, SAME_RAIL, 2 * (widest - 1) * dense_bytes // widest)


def simulate_multitask(assignment: TaskAssignment, batch_sizes: Sequence[int],
                       per_sample_ns: int, topology: Topology | None = None, *,
                       dense_bytes: int = 0, sync_ns: int | None = None) -> MultitaskResult:
    """One synchronous step: every GPU computes its share, then all meet at a barrier.

    A scale-up task split over ``g`` GPUs puts ``ceil(batch / g)`` samples on
    its busiest GPU.
    """
    topology = topology or Topology()
    if sync_ns is None:
        sync_ns = default_sync_ns(assignment, dense_bytes, topology)
    engine = Engine(topology)
    work = []
    gpu = 0
    if assignment.gpus_per_task is not None:
        if len(assignment.gpus_per_task) != len(batch_sizes):
            raise ValueError("assignment and batch sizes disagree on the task count")
        for t, (batch, g) in enumerate(zip(batch_sizes, assignment.gpus_per_task)):
            base, extra = divmod(batch, g)
            for k in range(g):
                share = base + (1 if k < extra else 0)
                work.append(engine.submit(f"gpu{gpu}", share * per_sample_ns,
                                          name=f"task{t} part{k}", meta={"task": t}))
                gpu += 1
    else:
        for group in assignment.groups:
            work.append(engine.submit(f"gpu{gpu}", sum(batch_sizes[t] for t in group) * per_sample_ns,
                                      name=f"tasks {list(group)}", meta={"tasks": list(group)}))
            gpu += 1
    engine.submit("sync", sync_ns, deps=work, kind="sync", name="barrier")
    timeline = engine.run()
    return MultitaskResult(timeline=timeline, step_ns=timeline.makespan, sync_ns=sync_ns,
                           total_gpus=gpu, samples=sum(batch_sizes))


def slowest_task_ns(batch_sizes: Sequence[int], gpus: Sequence[int], per_sample_ns: int) -> int:
    return max(math.ceil(b / g) * per_sample_ns for b, g in zip(batch_sizes, gpus))
