"""Ring-memory offloading for inference.

The GPU keeps ``K`` expert slots. Layer ``i`` (1-based) lives in slot
``(i - 1) mod K``. When ``compute(i)`` finishes its slot is released and the
experts of layer ``K + i`` start copying into it on the host-to-device
stream while the compute stream moves on.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

from .engine import Engine, Timeline
from .topology import LinkClass, Topology, link_ns
from .workload import RoutingTrace


@dataclass(frozen=True)
class RingPlan:
    num_layers: int
    ring_slots: int
    expert_bytes: int
    dense_bytes: int = 0
    compute_ns: object = 1_000_000  # int, or one int per layer

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.ring_slots < 1:
            raise ValueError("ring_slots must be >= 1")
        if self.expert_bytes < 0 or self.dense_bytes < 0:
            raise ValueError("byte counts must be non-negative")
        if self.ring_slots > self.num_layers:
            warnings.warn(f"ring_slots={self.ring_slots} exceeds num_layers={self.num_layers}; "
                          "clamping", stacklevel=3)
            object.__setattr__(self, "ring_slots", self.num_layers)
        if not isinstance(self.compute_ns, int):
            times = tuple(int(t) for t in self.compute_ns)
            if len(times) != self.num_layers:
                raise ValueError("need one compute time per layer")
            object.__setattr__(self, "compute_ns", times)

    def layer_compute_ns(self, layer: int) -> int:
        """Compute time of 1-based ``layer``."""
        if isinstance(self.compute_ns, int):
            return self.compute_ns
        return self.compute_ns[layer - 1]

    def slot(self, layer: int) -> int:
        return (layer - 1) % self.ring_slots


def compute_from_trace(trace: RoutingTrace, num_layers: int, *, base_ns: int = 0,
                       per_token_ns: int = 1000, rank: int = 0) -> tuple:
    """Per-layer compute times where layer ``i`` replays trace step ``i mod steps``.

    A layer costs as much as its busiest expert on ``rank``.
    """
    return tuple(
        base_ns + per_token_ns * int(trace.counts[(i % trace.steps), rank].max())
        for i in range(num_layers)
    )


@dataclass(frozen=True)
class RingOp:
    kind: str  # load | compute | release
    layer: int
    slot: int
    deps: tuple = ()  # indices into the schedule


def build_schedule(plan: RingPlan) -> list[RingOp]:
    """Loads of the first K layers, then compute, release, next load per layer."""
    if plan.ring_slots < 1:
        raise ValueError("ring_slots must be >= 1")
    ops: list[RingOp] = []
    load_at: dict[int, int] = {}
    release_at: dict[int, int] = {}
    n, k = plan.num_layers, plan.ring_slots
    for i in range(1, k + 1):
        load_at[i] = len(ops)
        ops.append(RingOp("load", i, plan.slot(i)))
    for i in range(1, n + 1):
        compute_idx = len(ops)
        ops.append(RingOp("compute", i, plan.slot(i), (load_at[i],)))
        release_at[i] = len(ops)
        ops.append(RingOp("release", i, plan.slot(i), (compute_idx,)))
        nxt = k + i
        if nxt <= n:
            load_at[nxt] = len(ops)
            ops.append(RingOp("load", nxt, plan.slot(nxt), (release_at[i],)))
    return ops


def peak_memory(plan: RingPlan) -> int:
    return plan.dense_bytes + plan.ring_slots * plan.expert_bytes


def baseline_memory(plan: RingPlan) -> int:
    return plan.dense_bytes + plan.num_layers * plan.expert_bytes


@dataclass
class RingResult:
    timeline: Timeline
    peak_gpu_bytes: int
    baseline_gpu_bytes: int
    stall_ns: int
    copy_ns: int
    warmup_ns: int
    compute_total_ns: int

    @property
    def makespan(self) -> int:
        return self.timeline.makespan

    @property
    def memory_reduction(self) -> float:
        if self.baseline_gpu_bytes == 0:
            return 0.0
        return 1 - self.peak_gpu_bytes / self.baseline_gpu_bytes

    def to_dict(self) -> dict:
        return {
            "makespan_ns": self.makespan,
            "compute_only_ns": self.compute_total_ns,
            "stall_ns": self.stall_ns,
            "copy_ns": self.copy_ns,
            "warmup_ns": self.warmup_ns,
            "peak_gpu_bytes": self.peak_gpu_bytes,
            "baseline_gpu_bytes": self.baseline_gpu_bytes,
            "memory_delta_bytes": self.baseline_gpu_bytes - self.peak_gpu_bytes,
        }


def simulate(plan: RingPlan, topology: Topology) -> RingResult:
    """Run the ring schedule with copies on ``h2d`` and layers on ``compute``.

    Releases are instantaneous: they free the slot at the end of the
    layer's compute. The last K layers keep their slots, since no later load
    reuses them. The one-off SSD-to-CPU warmup is priced separately.
    """
    copy_ns = link_ns(topology, LinkClass.PCIE, plan.expert_bytes) if plan.expert_bytes else 0
    engine = Engine(topology, base_memory={"gpu": plan.dense_bytes})
    task_of: dict[int, object] = {}
    ops = build_schedule(plan)
    for idx, op in enumerate(ops):
        if op.kind == "release":
            # folded into the compute task's free; deps resolve to the compute
            task_of[idx] = task_of[op.deps[0]]
            continue
        deps = [task_of[d] for d in op.deps]
        if op.kind == "load":
            task_of[idx] = engine.submit("h2d", copy_ns, deps=deps, kind="h2d",
                                         name=f"load L{op.layer}->slot{op.slot}",
                                         alloc={"gpu": plan.expert_bytes},
                                         meta={"layer": op.layer, "slot": op.slot})
        else:
            task_of[idx] = engine.submit("compute", plan.layer_compute_ns(op.layer), deps=deps,
                                         name=f"compute L{op.layer}",
                                         free=({"gpu": plan.expert_bytes}
                                               if op.layer + plan.ring_slots <= plan.num_layers
                                               else {}),
                                         meta={"layer": op.layer, "slot": op.slot})
    timeline = engine.run()
    compute_total = sum(plan.layer_compute_ns(i) for i in range(1, plan.num_layers + 1))
    warmup = plan.num_layers * link_ns(topology, LinkClass.SSD_IO, plan.expert_bytes) \
        if plan.expert_bytes else 0
    return RingResult(
        timeline=timeline,
        peak_gpu_bytes=timeline.peak_memory().get("gpu", plan.dense_bytes),
        baseline_gpu_bytes=baseline_memory(plan),
        stall_ns=timeline.makespan - compute_total,
        copy_ns=copy_ns,
        warmup_ns=warmup,
        compute_total_ns=compute_total,
    )


def serial_makespan(plan: RingPlan, topology: Topology) -> int:
    """Load-then-compute with no overlap at all."""
    copy_ns = link_ns(topology, LinkClass.PCIE, plan.expert_bytes) if plan.expert_bytes else 0
    return sum(copy_ns + plan.layer_compute_ns(i) for i in range(1, plan.num_layers + 1))


def slot_safety_violations(plan: RingPlan, timeline: Timeline) -> list[str]:
    """Loads that start writing a slot before its previous occupant finished computing."""
    loads = {}
    computes = {}
    for r in timeline.records:
        layer = r.meta["layer"]
        (loads if r.kind == "h2d" else computes)[layer] = r
    bad = []
    for layer, rec in loads.items():
        prev = layer - plan.ring_slots
        if prev >= 1 and rec.start < computes[prev].end:
            bad.append(f"load L{layer} starts at {rec.start} before compute L{prev} ends")
    return bad
