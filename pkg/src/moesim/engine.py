"""Deterministic event engine over FIFO streams.

Every task lives on exactly one stream (a device queue such as ``compute``
or ``h2d``, or a network channel such as ``rail3``). A stream runs its tasks
one at a time in submission order. A task starts once its stream is free
and every dependency has finished (``deps``) or started (``start_after``).

Because dependencies must already be submitted, submission order is a
topological order; placing tasks in that order yields the same schedule as
an event-queue simulation of FIFO streams. Time is integer nanoseconds.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

from .topology import Topology, transfer_ns


class UnknownDependencyError(ValueError):
    pass


class CycleError(ValueError):
    pass


@dataclass(frozen=True)
class TaskRecord:
    id: object
    name: str
    stream: str
    kind: str
    start: int
    end: int
    deps: tuple = ()
    start_after: tuple = ()
    alloc: dict = field(default_factory=dict)
    free: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass
class _Pending:
    id: object
    name: str
    stream: str
    kind: str
    duration: int
    deps: tuple
    start_after: tuple
    alloc: dict
    free: dict
    meta: dict


class Engine:
    def __init__(self, topology: Topology | None = None, base_memory: dict | None = None):
        self.topology = topology
        self.base_memory = dict(base_memory or {})
        self._tasks: list[_Pending] = []
        self._index: dict = {}

    def __len__(self):
        return len(self._tasks)

    def submit(self, stream: str, duration: int | None = None, *, deps=(), start_after=(),
               name: str | None = None, kind: str = "compute", nbytes: int | None = None,
               path=None, alloc: dict | None = None, free: dict | None = None,
               meta: dict | None = None, task_id=None):
        """Queue a task and return its id.

        Give either ``duration`` (ns) or ``nbytes`` plus ``path``, which is
        priced with the engine's topology.
        """
        if duration is None:
            if nbytes is None or path is None or self.topology is None:
                raise ValueError("need a duration, or nbytes and path with a topology")
            duration = transfer_ns(self.topology, tuple(path), nbytes)
        duration = int(duration)
        if duration < 0:
            raise ValueError("duration must be >= 0")

        tid = len(self._tasks) if task_id is None else task_id
        if tid in self._index:
            raise ValueError(f"duplicate task id {tid!r}")
        deps, start_after = tuple(deps), tuple(start_after)
        for d in deps + start_after:
            if d == tid:
                raise CycleError(f"task {tid!r} depends on itself")
            if d not in self._index:
                raise UnknownDependencyError(f"task {tid!r} depends on unknown task {d!r}")

        self._index[tid] = len(self._tasks)
        self._tasks.append(_Pending(
            id=tid, name=name if name is not None else str(tid), stream=stream, kind=kind,
            duration=duration, deps=deps, start_after=start_after,
            alloc=dict(alloc or {}), free=dict(free or {}), meta=dict(meta or {}),
        ))
        return tid

    def run(self) -> "Timeline":
        stream_free: dict[str, int] = defaultdict(int)
        starts: list[int] = []
        ends: list[int] = []
        records = []
        for task in self._tasks:
            ready = stream_free[task.stream]
            for d in task.deps:
                ready = max(ready, ends[self._index[d]])
            for d in task.start_after:
                ready = max(ready, starts[self._index[d]])
            end = ready + task.duration
            starts.append(ready)
            ends.append(end)
            stream_free[task.stream] = end
            records.append(TaskRecord(
                id=task.id, name=task.name, stream=task.stream, kind=task.kind,
                start=ready, end=end, deps=task.deps, start_after=task.start_after,
                alloc=task.alloc, free=task.free, meta=task.meta,
            ))
        return Timeline(records, base_memory=self.base_memory)


class Timeline:
    """Result of :meth:`Engine.run`."""

    def __init__(self, records, base_memory: dict | None = None):
        self.records: list[TaskRecord] = list(records)
        self.base_memory = dict(base_memory or {})
        self._by_id = {r.id: r for r in self.records}

    def __getitem__(self, task_id) -> TaskRecord:
        return self._by_id[task_id]

    def __len__(self):
        return len(self.records)

    @property
    def makespan(self) -> int:
        return max((r.end for r in self.records), default=0)

    @property
    def streams(self) -> list[str]:
        return sorted({r.stream for r in self.records})

    def on(self, stream: str) -> list[TaskRecord]:
        return [r for r in self.records if r.stream == stream]

    def of_kind(self, kind: str) -> list[TaskRecord]:
        return [r for r in self.records if r.kind == kind]

    def busy_intervals(self, stream: str) -> list[tuple[int, int]]:
        return [(r.start, r.end) for r in self.on(stream) if r.end > r.start]

    def busy_time(self, stream: str) -> int:
        return sum(e - s for s, e in self.busy_intervals(stream))

    def idle_time(self, stream: str) -> int:
        """Gaps on ``stream`` between time 0 and its last task end."""
        tasks = self.on(stream)
        if not tasks:
            return 0
        return max(r.end for r in tasks) - self.busy_time(stream)

    def peak_memory(self) -> dict:
        # Frees at time t land before allocations at t.
        events = []
        for r in self.records:
            for tier, nbytes in r.free.items():
                events.append((r.end, 0, tier, -nbytes))
            for tier, nbytes in r.alloc.items():
                events.append((r.start, 1, tier, nbytes))
        events.sort(key=lambda e: (e[0], e[1]))
        level = dict(self.base_memory)
        peak = dict(self.base_memory)
        for _, _, tier, delta in events:
            level[tier] = level.get(tier, 0) + delta
            peak[tier] = max(peak.get(tier, 0), level[tier])
        return peak

    def to_dict(self) -> dict:
        return {
            "makespan_ns": self.makespan,
            "tasks": [
                {
                    "id": r.id, "name": r.name, "stream": r.stream, "kind": r.kind,
                    "start_ns": r.start, "end_ns": r.end, "deps": list(r.deps),
                }
                for r in self.records
            ],
            "streams": {
                s: {"busy_ns": self.busy_time(s), "idle_ns": self.idle_time(s)}
                for s in self.streams
            },
            "peak_memory": {k: v for k, v in sorted(self.peak_memory().items())},
        }

    def trace_events(self, pid: int = 0) -> list[dict]:
        """Complete ("X") events in the trace-event format; times in microseconds."""
        tids = {s: i for i, s in enumerate(self.streams)}
        events = [
            {"name": "thread_name", "ph": "M", "pid": pid, "tid": tids[s], "args": {"name": s}}
            for s in self.streams
        ] if self.records else []
        for r in self.records:
            events.append({
                "name": r.name, "cat": r.kind, "ph": "X", "pid": pid, "tid": tids[r.stream],
                "ts": r.start / 1000, "dur": r.duration / 1000,
                "args": {"id": str(r.id), "stream": r.stream},
            })
        return events

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.trace_events(), fh, sort_keys=True, indent=1)
            fh.write("\n")
