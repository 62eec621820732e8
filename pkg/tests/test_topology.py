import itertools

import pytest
from hypothesis import given, strategies as st

from moesim.topology import LinkClass, Topology, route, transfer_ns, transfer_time

NV, TOR, LEAF, SPIN = LinkClass.NVLINK, LinkClass.TOR, LinkClass.LEAF, LinkClass.SPIN


@pytest.fixture
def two_clusters():
    return Topology(clusters=2, nodes_per_cluster=2, gpus_per_node=8)


def test_same_gpu_empty(two_clusters):
    assert route(two_clusters, 5, 5) == ()


def test_intra_node_nvlink(two_clusters):
    a = two_clusters.gpu_id(0, 0, 0)
    b = two_clusters.gpu_id(0, 0, 7)
    assert route(two_clusters, a, b) == (NV,)


def test_cross_cluster_cross_rail_hits_spin(two_clusters):
    a = two_clusters.gpu_id(0, 0, 0)
    b = two_clusters.gpu_id(1, 1, 7)
    assert SPIN in route(two_clusters, a, b)


def test_same_rail_avoids_spin(two_clusters):
    a = two_clusters.gpu_id(0, 0, 7)
    b = two_clusters.gpu_id(1, 1, 7)
    assert route(two_clusters, a, b) == (TOR, LEAF, TOR)


def test_invalid_ids(two_clusters):
    with pytest.raises(ValueError):
        route(two_clusters, 0, 32)
    with pytest.raises(ValueError):
        two_clusters.gpu_id(2, 0, 0)


def test_gpu_id_bijection(two_clusters):
    seen = set()
    for c, n, g in itertools.product(range(2), range(2), range(8)):
        gid = two_clusters.gpu_id(c, n, g)
        assert two_clusters.coords(gid) == (c, n, g)
        seen.add(gid)
    assert seen == set(range(32))


def test_transfer_time_examples():
    topo = Topology(links={"NVLINK": {"bandwidth": 100e9, "latency": 1e-6}})
    assert transfer_time(topo, (), 10**9) == 0
    assert transfer_time(topo, (NV,), 100e6) == pytest.approx(1e-6 + 1e-3)
    assert transfer_ns(topo, (NV,), 100_000_000) == 1_001_000


def test_spin_hop_never_faster():
    topo = Topology()
    for nbytes in (0, 1, 10**6, 10**9):
        assert transfer_ns(topo, (TOR, LEAF, SPIN, LEAF, TOR), nbytes) >= \
            transfer_ns(topo, (TOR, LEAF, TOR), nbytes)


def test_invalid_links():
    with pytest.raises(ValueError):
        Topology(links={"TOR": {"bandwidth": 0}})
    with pytest.raises(ValueError):
        Topology(links={"TOR": {"bandwidth": 1, "latency": -1}})


topos = st.builds(Topology, st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))


@given(topos, st.data())
def test_route_symmetry_and_rail_property(topo, data):
    a = data.draw(st.integers(0, topo.num_gpus - 1))
    b = data.draw(st.integers(0, topo.num_gpus - 1))
    assert sorted(route(topo, a, b)) == sorted(route(topo, b, a))
    cross = topo.node_of(a) != topo.node_of(b) and topo.local_rank(a) != topo.local_rank(b)
    assert (SPIN in route(topo, a, b)) == cross
    assert (route(topo, a, b) == ()) == (a == b)


@given(st.integers(0, 10**10), st.integers(0, 10**10))
def test_transfer_monotone_in_bytes(x, y):
    topo = Topology()
    lo, hi = sorted((x, y))
    path = (TOR, LEAF, SPIN, LEAF, TOR)
    assert transfer_ns(topo, path, lo) <= transfer_ns(topo, path, hi)
    assert transfer_time(topo, path, lo) <= transfer_time(topo, path, hi)
