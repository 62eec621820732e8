import random

import pytest
from hypothesis import given, settings, strategies as st

from moesim.collectives import (BucketSet, DuplicateGradientError, ForeignGradientError,
                                GradBucket, SliceEntry, allgather, alltoall_flat,
                                alltoall_hierarchical, assign_buckets, flat_transfers,
                                fuse_slices, hierarchical_transfers, lower_slice_exchange,
                                lower_transfers, spin_hops, split_blob)
from moesim.engine import Engine
from moesim.topology import LinkClass, Topology
from oracles import transpose


def tagged(n):
    return [[f"{s}->{d}".encode() for d in range(n)] for s in range(n)]


def test_flat_small_cases():
    assert alltoall_flat([[b"x"]]) == [[b"x"]]
    assert alltoall_flat([["a", "b"], ["c", "d"]]) == [["a", "c"], ["b", "d"]]


def test_flat_rejects_non_square():
    with pytest.raises(ValueError):
        alltoall_flat([[1, 2], [3]])


def test_flat_equals_transpose_oracle():
    rng = random.Random(4)
    payload = [[bytes(rng.randrange(256) for _ in range(rng.randrange(5))) for _ in range(4)]
               for _ in range(4)]
    assert alltoall_flat(payload) == transpose(payload)


def test_hierarchical_single_node():
    topo = Topology(1, 1, 4)
    assert alltoall_hierarchical(tagged(4), topo) == alltoall_flat(tagged(4))


def test_hierarchical_2x2_matches_flat():
    topo = Topology(1, 2, 2)
    log = []
    out = alltoall_hierarchical(tagged(4), topo, log)
    assert out == alltoall_flat(tagged(4))
    assert out[3] == [b"0->3", b"1->3", b"2->3", b"3->3"]
    assert spin_hops(log) == 0
    assert {t.path for t in log if t.phase == 1} <= {(), (LinkClass.NVLINK,)}
    assert {t.path for t in log if t.phase == 2} <= {(), (LinkClass.TOR, LinkClass.LEAF,
                                                          LinkClass.TOR)}


def test_hierarchical_rank_mismatch():
    with pytest.raises(ValueError):
        alltoall_hierarchical(tagged(4), Topology(1, 1, 8))


def test_hierarchical_carries_every_block_once():
    topo = Topology(2, 1, 3)
    log = hierarchical_transfers(tagged(6), topo)
    delivered = sorted(b for t in log if t.phase == 2 for b in t.blocks)
    assert delivered == sorted((s, d) for s in range(6) for d in range(6))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 2), st.integers(1, 4), st.integers(0, 2**31))
def test_hierarchical_equals_flat(nodes, clusters, gpus, seed):
    topo = Topology(clusters, nodes, gpus)
    n = topo.num_gpus
    rng = random.Random(seed)
    payload = [[rng.randbytes(rng.randrange(4)) for _ in range(n)] for _ in range(n)]
    log = []
    assert alltoall_hierarchical(payload, topo, log) == transpose(payload)
    assert spin_hops(log) == 0


def test_hierarchical_beats_flat_on_spine_bound_topology():
    topo = Topology(1, 4, 4)
    payload = [[bytes(1 << 16) for _ in range(16)] for _ in range(16)]
    flat_e, hier_e = Engine(topo), Engine(topo)
    lower_transfers(flat_e, flat_transfers(payload, topo))
    lower_transfers(hier_e, hierarchical_transfers(payload, topo))
    assert hier_e.run().makespan < flat_e.run().makespan


def test_allgather():
    assert allgather([b"abc"]) == [b"abc"]
    assert allgather([b"a", b"b", b"c", b"d"]) == [b"abcd"] * 4
    rng = random.Random(1)
    sl = [rng.randbytes(rng.randrange(9)) for _ in range(6)]
    assert allgather(sl) == [b"".join(sl)] * 6
    with pytest.raises(ValueError):
        allgather([b"a", None])


def test_fuse_examples():
    blob, index = fuse_slices([b"xyz"])
    assert blob == b"xyz" and index == (SliceEntry(0, 0, 3),)
    blob, index = fuse_slices([b"abc", b"", b"defgh"])
    assert len(blob) == 8
    assert split_blob(blob, index) == [b"abc", b"", b"defgh"]


def test_fuse_errors():
    with pytest.raises(ValueError):
        fuse_slices([])
    blob, index = fuse_slices([b"ab", b"cd"])
    with pytest.raises(ValueError):
        split_blob(blob + b"!", index)
    with pytest.raises(ValueError):
        split_blob(blob, (SliceEntry(0, 0, 2), SliceEntry(1, 3, 1)))


@given(st.lists(st.binary(max_size=20), min_size=1, max_size=30))
def test_fuse_split_round_trip(slices):
    assert split_blob(*fuse_slices(slices)) == slices


@pytest.mark.parametrize("k", [1, 2, 7, 64])
def test_fusion_issues_one_network_task(k):
    topo = Topology(1, 2, 2)
    sizes = [100 * (i + 1) for i in range(k)]
    fused, unfused = Engine(topo), Engine(topo)
    lower_slice_exchange(fused, 0, 2, sizes, fused=True)
    lower_slice_exchange(unfused, 0, 2, sizes, fused=False)
    assert len(fused.run().of_kind("net")) == 1
    assert len(unfused.run().of_kind("net")) == k
    if k > 1:
        assert fused.run().makespan < unfused.run().makespan


def test_bucket_capacity_one():
    b = GradBucket(["w"])
    assert b.push("w") == ("w",)
    assert b.flushed


def test_bucket_registration_order():
    b = GradBucket(["a", "b", "c"])
    assert b.push("c") is None
    assert b.push("a") is None
    assert b.push("b") == ("a", "b", "c")


def test_bucket_errors():
    b = GradBucket(["a", "b"])
    b.push("a")
    with pytest.raises(DuplicateGradientError):
        b.push("a")
    with pytest.raises(ForeignGradientError):
        b.push("z")


def test_buckets_fill_back_to_front():
    buckets = assign_buckets(["l0", "l1", "l2", "l3", "l4"], 2)
    assert [b.members for b in buckets] == [("l4", "l3"), ("l2", "l1"), ("l0",)]


@given(st.integers(1, 40), st.integers(1, 9), st.randoms())
def test_every_gradient_flushed_exactly_once(n, cap, rnd):
    params = [f"p{i}" for i in range(n)]
    bs = BucketSet(params, cap)
    order = params[:]
    rnd.shuffle(order)
    flushed = []
    for p in order:
        out = bs.push(p)
        if out is not None:
            flushed.append(out)
    assert sorted(p for f in flushed for p in f) == sorted(params)
    assert len(flushed) == len(bs.buckets)
    assert sorted(flushed) == sorted(b.members for b in bs.buckets)
