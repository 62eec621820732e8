"""CPU cache for sparse parameter states and the 2D prefetch schedule.

The cache follows the hit-counting policy literally:

1. a resident parameter is a hit and its count grows by one;
2. otherwise, while ``acc_caches + 1 < cpu_size`` the parameter is admitted
   with one hit (so fresh admissions top out at ``cpu_size - 1``);
3. otherwise the resident parameter whose count is the global minimum is
   written back and evicted, but only if that minimum reaches ``threshold``;
   ties go to the lowest id, and the newcomer is admitted with one hit;
4. if the minimum is below ``threshold`` nothing is evictable and the
   parameter streams from SSD without touching the cache.

Every ``K`` calls to :meth:`CPUCache.end_step` all counts are scaled by
``beta``. Note the eviction gate is ``>= threshold``: cold entries are kept.
"""
from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field

from .engine import Engine, Timeline
from .model_spec import InfeasibleError, MachineSpec, ModelSpec, check_feasibility
from .topology import LinkClass, Topology, link_ns
from .workload import RoutingTrace


@dataclass(frozen=True)
class CacheParams:
    cpu_size: int
    threshold: float = 1
    beta: float = 1.0
    k: int = 1

    def __post_init__(self):
        if self.cpu_size < 0:
            raise ValueError("cpu_size must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")


class Outcome(str, enum.Enum):
    HIT = "CacheHit"
    FRESH = "FetchedFresh"
    EVICTED = "EvictedAndFetched"
    STREAM = "StreamThrough"


@dataclass(frozen=True)
class AccessOutcome:
    kind: Outcome
    victim: object = None

    @property
    def reads_ssd(self) -> bool:
        return self.kind is not Outcome.HIT


class CPUCache:
    def __init__(self, params: CacheParams):
        self.params = params
        self.hits: dict = {}
        self.resident: set = set()
        self.acc_caches = 0
        self.steps = 0
        self._heap: list = []  # (hits, id); lazily invalidated

    def access(self, p) -> AccessOutcome:
        hits = self.hits
        if p in self.resident:
            hits[p] += 1
            heapq.heappush(self._heap, (hits[p], p))
            return AccessOutcome(Outcome.HIT)
        if self.acc_caches + 1 < self.params.cpu_size:
            hits[p] = 1
            self.acc_caches += 1
            self.resident.add(p)
            heapq.heappush(self._heap, (1, p))
            return AccessOutcome(Outcome.FRESH)
        victim = self._min_entry()
        if victim is None or victim[0] < self.params.threshold:
            return AccessOutcome(Outcome.STREAM)
        heapq.heappop(self._heap)
        _, pa = victim
        del hits[pa]
        self.resident.discard(pa)
        hits[p] = 1
        self.resident.add(p)
        heapq.heappush(self._heap, (1, p))
        return AccessOutcome(Outcome.EVICTED, pa)

    def _min_entry(self):
        heap, hits = self._heap, self.hits
        while heap:
            value, pid = heap[0]
            if hits.get(pid) == value and pid in self.resident:
                return heap[0]
            heapq.heappop(heap)
        return None

    def end_step(self) -> bool:
        """Advance the cycle counter; returns True when a decay happened."""
        self.steps += 1
        if self.steps < self.params.k:
            return False
        beta = self.params.beta
        for pid in self.hits:
            self.hits[pid] = self.hits[pid] * beta
        self.steps = 0
        self._heap = [(v, pid) for pid, v in self.hits.items()]
        heapq.heapify(self._heap)
        return True

    def state(self) -> dict:
        return {
            "hits": dict(self.hits),
            "resident": set(self.resident),
            "acc_caches": self.acc_caches,
            "steps": self.steps,
        }


# Bytes per sparse element moved by each kind of transfer.
SSD_STATE_BYTES = 12  # fp32 master, momentum, variance
GPU_PARAM_BYTES = 2  # fp16 parameter
DENSE_PARAM_BYTES = 2


@dataclass
class PrefetchResult:
    timeline: Timeline
    stalls: list
    outcomes: list = field(default_factory=list)
    cache: CPUCache | None = None
    computes: list = field(default_factory=list)

    @property
    def exposed_stall(self) -> int:
        return self.stalls[0] if self.stalls else 0

    @property
    def steady_stall(self) -> int:
        return sum(self.stalls[1:])

    @property
    def total_stall(self) -> int:
        return sum(self.stalls)

    def outcome_counts(self) -> dict:
        counts = {o.value: 0 for o in Outcome}
        for rec in self.outcomes:
            counts[rec["outcome"]] += 1
        return counts

    def outcome_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.outcomes)


def run_2d_schedule(model: ModelSpec, machine: MachineSpec, trace: RoutingTrace,
                    topology: Topology, cache_params: CacheParams, *, rank: int = 0,
                    lookahead: int = 1, compute_ns: int = 1_000_000, per_token_ns: int = 0,
                    flush_period: int | None = None) -> PrefetchResult:
    """Overlap dense AllGather (NVLink) and sparse fetch (SSD then PCIe) with compute.

    Each trace step runs every MoE layer once on ``rank``. The sparse
    parameters a layer needs are the ``(layer, expert)`` blocks that received
    tokens. Fetches for layer ``j + lookahead`` are issued when ``compute(j)``
    starts; the first ``lookahead`` layers are fetched at time 0.
    """
    report = check_feasibility(model, machine)
    if not report.ok:
        raise InfeasibleError(report)
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    if not 0 <= rank < trace.ranks:
        raise ValueError(f"rank {rank} outside trace with {trace.ranks} ranks")
    flush_period = cache_params.k if flush_period is None else flush_period

    layers = model.moe_layers
    experts = trace.experts
    block_elems = model.sparse_params // (layers * experts)
    ssd_block_ns = link_ns(topology, LinkClass.SSD_IO, SSD_STATE_BYTES * block_elems)
    h2d_block_ns = link_ns(topology, LinkClass.PCIE, GPU_PARAM_BYTES * block_elems)
    dp = topology.gpus_per_node
    dense_layer_bytes = DENSE_PARAM_BYTES * (model.dense_params // layers)
    gather_bytes = dense_layer_bytes * (dp - 1) // dp
    dense_ns = link_ns(topology, LinkClass.NVLINK, gather_bytes) if gather_bytes else 0

    engine = Engine(topology)
    cache = CPUCache(cache_params)
    outcomes: list = []
    fetches: dict[int, list] = {}
    fetched_bytes: dict[int, int] = {}
    computes: list = []
    total = trace.steps * layers

    def issue(j, start_after):
        step, layer = divmod(j, layers)
        if layer == 0 and step > 0:
            cache.end_step()
        deps = [engine.submit("nvlink", dense_ns, start_after=start_after, kind="net",
                              name=f"allgather s{step} l{layer}",
                              alloc={"gpu": dense_layer_bytes})]
        for e in range(experts):
            if trace.counts[step, rank, e] == 0:
                continue
            pid = layer * experts + e
            out = cache.access(pid)
            tag = {"access": len(outcomes), "param": pid}
            outcomes.append({"access": len(outcomes), "step": step, "layer": layer, "param": pid,
                             "outcome": out.kind.value, "victim": out.victim})
            before = []
            if out.kind is Outcome.EVICTED:
                before = [engine.submit("ssd", ssd_block_ns, start_after=start_after, kind="io",
                                        name=f"writeback p{out.victim}",
                                        meta={**tag, "op": "writeback"})]
            if out.reads_ssd:
                before = [engine.submit("ssd", ssd_block_ns, deps=before,
                                        start_after=start_after, kind="io",
                                        name=f"ssd read p{pid}", meta={**tag, "op": "read"})]
            deps.append(engine.submit("pcie", h2d_block_ns, deps=before, start_after=start_after,
                                      kind="h2d", name=f"h2d p{pid}", meta={**tag, "op": "h2d"},
                                      alloc={"gpu": GPU_PARAM_BYTES * block_elems}))
        fetches[j] = deps
        fetched_bytes[j] = dense_layer_bytes + GPU_PARAM_BYTES * block_elems * (len(deps) - 1)

    for j in range(min(lookahead, total)):
        issue(j, ())
    for j in range(total):
        step, layer = divmod(j, layers)
        tokens = int(trace.counts[step, rank].sum())
        cid = engine.submit("compute", compute_ns + per_token_ns * tokens, deps=fetches[j],
                            name=f"compute s{step} l{layer}", free={"gpu": fetched_bytes[j]})
        computes.append(cid)
        if j + lookahead < total:
            issue(j + lookahead, (cid,))
        if flush_period and layer == layers - 1 and (step + 1) % flush_period == 0:
            if cache.resident:
                engine.submit("ssd", len(cache.resident) * ssd_block_ns, deps=(cid,), kind="io",
                              name=f"flush s{step}")

    timeline = engine.run()
    stalls = []
    prev_end = 0
    for cid in computes:
        rec = timeline[cid]
        stalls.append(max(0, rec.start - prev_end))
        prev_end = rec.end
    return PrefetchResult(timeline, stalls, outcomes, cache, computes)
