import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moesim.model_spec import InfeasibleError, MachineSpec, ModelSpec
from moesim.prefetch import AccessOutcome, CacheParams, CPUCache, Outcome, run_2d_schedule
from moesim.topology import Topology
from moesim.workload import RoutingTrace, gen_trace
from oracles import ReferenceCache


def cache_with(cpu_size, threshold, resident_hits):
    c = CPUCache(CacheParams(cpu_size, threshold, 1.0, 100))
    for pid, h in resident_hits.items():
        c.access(pid)
        for _ in range(h - 1):
            c.access(pid)
    return c


def test_fresh_admission():
    c = CPUCache(CacheParams(4))
    assert c.access("A") == AccessOutcome(Outcome.FRESH)
    assert c.hits == {"A": 1} and c.acc_caches == 1


def test_hit_increments():
    c = CPUCache(CacheParams(4))
    c.access("A")
    assert c.access("A").kind is Outcome.HIT
    assert c.hits["A"] == 2


def test_evicts_min_at_or_above_threshold():
    c = cache_with(3, 1, {"A": 3, "B": 1})
    out = c.access("C")
    assert out == AccessOutcome(Outcome.EVICTED, "B")
    assert c.hits == {"A": 3, "C": 1}
    assert c.resident == {"A", "C"}


def test_stream_through_when_min_below_threshold():
    c = cache_with(3, 5, {"A": 3, "B": 1})
    assert c.access("C") == AccessOutcome(Outcome.STREAM)
    assert c.hits == {"A": 3, "B": 1}


def test_admission_guard_is_strict():
    c = CPUCache(CacheParams(2, threshold=10))
    assert c.access(1).kind is Outcome.FRESH
    # acc_caches + 1 < 2 fails with one resident
    assert c.access(2).kind is Outcome.STREAM
    assert c.acc_caches == 1


def test_tie_break_lowest_id():
    c = cache_with(4, 1, {7: 2, 3: 2, 5: 2})
    assert c.access(9).victim == 3


def test_zero_capacity_streams_everything():
    c = CPUCache(CacheParams(0))
    assert {c.access(i).kind for i in range(10)} == {Outcome.STREAM}
    assert c.hits == {}


def test_decay_identity_when_beta_one():
    c = CPUCache(CacheParams(4, beta=1.0, k=1))
    c.access("A"); c.access("A")
    c.end_step()
    assert c.hits == {"A": 2}


def test_decay_after_k_steps():
    beta = 0.5
    c = CPUCache(CacheParams(8, beta=beta, k=2))
    for _ in range(4):
        c.access("A")
    assert c.end_step() is False
    assert c.hits["A"] == 4
    assert c.end_step() is True
    assert c.hits["A"] == 4 * beta and c.steps == 0


def test_no_decay_before_k():
    c = CPUCache(CacheParams(8, beta=0.5, k=3))
    c.access("A")
    c.end_step()
    assert c.hits["A"] == 1 and c.steps == 1


def test_reference_examples_agree():
    for cpu, thr, seq in [(4, 1, "AAB"), (3, 1, "AAABC"), (3, 5, "AAABC")]:
        ref, c = ReferenceCache(cpu, thr, 1.0, 10), CPUCache(CacheParams(cpu, thr, 1.0, 10))
        for p in seq:
            got = c.access(p)
            assert (got.kind.value, got.victim) == ref.access(p)


ops = st.lists(st.one_of(st.integers(0, 12), st.just("step")), max_size=120)


@settings(max_examples=300, deadline=None)
@given(ops, st.integers(0, 8), st.sampled_from([0, 0.5, 1, 1.5, 2, 3]),
       st.sampled_from([0.25, 0.5, 0.9, 1.0]), st.sampled_from([1, 2, 5]))
def test_matches_reference_interpreter(seq, cpu, thr, beta, k):
    ref = ReferenceCache(cpu, thr, beta, k)
    c = CPUCache(CacheParams(cpu, thr, beta, k))
    prev = {}
    for op in seq:
        if op == "step":
            decayed = c.end_step()
            ref.end_step()
            if decayed:
                prev = {}
            continue
        got = c.access(op)
        assert (got.kind.value, got.victim) == ref.access(op)
        assert len(c.resident) <= cpu
        assert c.acc_caches == len(c.resident)
        for pid in c.resident:
            assert c.hits[pid] >= prev.get(pid, 0)
        prev = {p: c.hits[p] for p in c.resident}
    assert c.hits == ref.hits and c.resident == ref.caches
    assert (c.acc_caches, c.steps) == (ref.acc_caches, ref.steps)


# ---------- 2D schedule ----------

MS = 1_000_000


def synthetic(steps=2, layers=4, experts=1, tokens=10, skew=0.0, seed=0):
    """1 ms SSD read, 2 ms PCIe copy and 1 ms AllGather per layer."""
    block = 1_000_000
    model = ModelSpec(dense_params=layers * 1_000_000, sparse_params=layers * experts * block,
                      moe_layers=layers, activation_prob=1.0)
    machine = MachineSpec(1, 10**15, 10**15, 10**15, gpus_per_node=2)
    topo = Topology(1, 1, 2, links={
        "NVLINK": {"bandwidth": 1e9, "latency": 0},
        "PCIE": {"bandwidth": 1e9, "latency": 0},
        "SSD_IO": {"bandwidth": 12e9, "latency": 0},
    })
    trace = gen_trace(seed, steps, 1, experts, tokens, skew)
    return model, machine, topo, trace


def test_zero_cost_prefetch_has_no_stall():
    _, machine, _, trace = synthetic()
    model = ModelSpec(dense_params=4_000_000, sparse_params=0, moe_layers=4)
    topo = Topology(1, 1, 1, links={"PCIE": {"bandwidth": 1e9, "latency": 0},
                                    "SSD_IO": {"bandwidth": 1e9, "latency": 0}})
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(100), compute_ns=5 * MS,
                          flush_period=0)
    assert res.total_stall == 0
    assert res.timeline.makespan == 8 * 5 * MS


def test_prefetch_hides_everything_but_first_fetch():
    model, machine, topo, trace = synthetic()
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(100), compute_ns=5 * MS,
                          flush_period=0)
    # layer 0 waits for SSD read (1 ms) + PCIe copy (2 ms)
    assert res.stalls == [3 * MS] + [0] * 7
    assert res.timeline.makespan == 3 * MS + 8 * 5 * MS
    kinds = [o["outcome"] for o in res.outcomes]
    assert kinds == ["FetchedFresh"] * 4 + ["CacheHit"] * 4


def test_compute_never_starts_before_its_parameters():
    model, machine, topo, trace = synthetic(steps=3, layers=3, experts=6, tokens=40, skew=1.0)
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(5, threshold=1),
                          compute_ns=2 * MS)
    tl = res.timeline
    for cid in res.computes:
        assert all(tl[cid].start >= tl[d].end for d in tl[cid].deps)


def test_zero_capacity_serializes_on_ssd():
    model, machine, topo, trace = synthetic(steps=1, layers=3, experts=4, tokens=50)
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(0), compute_ns=MS)
    assert {o["outcome"] for o in res.outcomes} == {"StreamThrough"}
    reads = res.timeline.on("ssd")
    assert len(reads) == len(res.outcomes)
    for a, b in zip(reads, reads[1:]):
        assert a.end <= b.start


def test_every_eviction_written_back_first():
    model, machine, topo, trace = synthetic(steps=4, layers=2, experts=8, tokens=30, skew=0.8)
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(4, threshold=1),
                          compute_ns=MS)
    evictions = [o for o in res.outcomes if o["outcome"] == "EvictedAndFetched"]
    assert evictions
    tl = res.timeline
    by_access = {}
    for r in tl.records:
        if "access" in r.meta:
            by_access.setdefault(r.meta["access"], {})[r.meta["op"]] = r
    for o in res.outcomes:
        ops = by_access[o["access"]]
        assert ("writeback" in ops) == (o["outcome"] == "EvictedAndFetched")
    for o in evictions:
        ops = by_access[o["access"]]
        assert ops["writeback"].id in ops["read"].deps
        assert ops["writeback"].end <= ops["read"].start <= ops["h2d"].start


def test_lookahead_two_issues_earlier():
    model, machine, topo, trace = synthetic()
    one = run_2d_schedule(model, machine, trace, topo, CacheParams(100), compute_ns=MS,
                          flush_period=0)
    two = run_2d_schedule(model, machine, trace, topo, CacheParams(100), compute_ns=MS,
                          lookahead=2, flush_period=0)
    assert two.total_stall <= one.total_stall


def test_flush_tasks_follow_cycle_period():
    model, machine, topo, trace = synthetic(steps=4)
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(100, k=2), compute_ns=MS)
    assert len([r for r in res.timeline.records if r.name.startswith("flush")]) == 2


def test_infeasible_model_refused():
    model, _, topo, trace = synthetic()
    tiny = MachineSpec(1, 1, 10**15, 10**15)
    with pytest.raises(InfeasibleError) as err:
        run_2d_schedule(model, tiny, trace, topo, CacheParams(4))
    assert err.value.report.failing_tiers == ["gpu"]


def test_outcome_lines_are_json():
    import json
    model, machine, topo, trace = synthetic(steps=1)
    res = run_2d_schedule(model, machine, trace, topo, CacheParams(4), compute_ns=MS)
    lines = res.outcome_lines().splitlines()
    assert len(lines) == len(res.outcomes)
    assert json.loads(lines[0])["outcome"] == "FetchedFresh"
