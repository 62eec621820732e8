"""Rail-optimized cluster network with an alpha-beta transfer cost model.

GPUs are addressed by a global rank
``(cluster * nodes_per_cluster + node) * gpus_per_node + local_rank``.
Every local rank ``i`` forms a rail: the ToR bridges of GPU ``i`` in all
nodes hang off leaf group ``i``, so same-rail traffic never reaches a spin
switch. Cross-rail inter-node traffic climbs to the spin tier.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction


class LinkClass(str, enum.Enum):
    NVLINK = "NVLINK"
    PCIE = "PCIE"
    SSD_IO = "SSD_IO"
    TOR = "TOR"
    LEAF = "LEAF"
    SPIN = "SPIN"


@dataclass(frozen=True)
class Link:
    bandwidth: float  # bytes / s
    latency: float = 0.0  # s

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("link bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("link latency must be non-negative")


# A100-class node: NVSwitch, PCIe 4.0 x16, NVMe, 200 Gb/s rails, thinner spine.
DEFAULT_LINKS = {
    LinkClass.NVLINK: Link(300e9, 1e-6),
    LinkClass.PCIE: Link(25e9, 2e-6),
    LinkClass.SSD_IO: Link(3e9, 100e-6),
    LinkClass.TOR: Link(25e9, 1e-6),
    LinkClass.LEAF: Link(25e9, 1e-6),
    LinkClass.SPIN: Link(12.5e9, 2e-6),
}

Path = tuple  # tuple[LinkClass, ...]

SAME_RAIL = (LinkClass.TOR, LinkClass.LEAF, LinkClass.TOR)
CROSS_RAIL = (LinkClass.TOR, LinkClass.LEAF, LinkClass.SPIN, LinkClass.LEAF, LinkClass.TOR)


def _exact(x) -> Fraction:
    return Fraction(x) if isinstance(x, (int, Fraction)) else Fraction(repr(float(x)))


@dataclass(frozen=True)
class Topology:
    clusters: int = 1
    nodes_per_cluster: int = 1
    gpus_per_node: int = 8
    links: dict = field(default_factory=lambda: dict(DEFAULT_LINKS))

    def __post_init__(self):
        if min(self.clusters, self.nodes_per_cluster, self.gpus_per_node) < 1:
            raise ValueError("topology counts must be >= 1")
        links = dict(DEFAULT_LINKS)
        for key, link in self.links.items():
            links[LinkClass(key)] = link if isinstance(link, Link) else Link(**link)
        object.__setattr__(self, "links", links)

    @property
    def nodes(self) -> int:
        return self.clusters * self.nodes_per_cluster

    @property
    def num_gpus(self) -> int:
        return self.nodes * self.gpus_per_node

    def gpu_id(self, cluster: int, node: int, local_rank: int) -> int:
        if not (0 <= cluster < self.clusters and 0 <= node < self.nodes_per_cluster
                and 0 <= local_rank < self.gpus_per_node):
            raise ValueError(f"invalid GPU coordinates ({cluster}, {node}, {local_rank})")
        return (cluster * self.nodes_per_cluster + node) * self.gpus_per_node + local_rank

    def coords(self, gpu: int) -> tuple[int, int, int]:
        self._check(gpu)
        node_global, local = divmod(gpu, self.gpus_per_node)
        cluster, node = divmod(node_global, self.nodes_per_cluster)
        return cluster, node, local

    def node_of(self, gpu: int) -> int:
        self._check(gpu)
        return gpu // self.gpus_per_node

    def local_rank(self, gpu: int) -> int:
        self._check(gpu)
        return gpu % self.gpus_per_node

    def _check(self, gpu: int) -> None:
        if not 0 <= gpu < self.num_gpus:
            raise ValueError(f"invalid GPU id {gpu} (topology has {self.num_gpus})")

    def to_dict(self) -> dict:
        return {
            "clusters": self.clusters,
            "nodes_per_cluster": self.nodes_per_cluster,
            "gpus_per_node": self.gpus_per_node,
            "links": {
                k.value: {"bandwidth": v.bandwidth, "latency": v.latency}
                for k, v in sorted(self.links.items(), key=lambda kv: kv[0].value)
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        return cls(
            clusters=data.get("clusters", 1),
            nodes_per_cluster=data.get("nodes_per_cluster", 1),
            gpus_per_node=data.get("gpus_per_node", 8),
            links=data.get("links", {}),
        )


def route(topo: Topology, src: int, dst: int) -> Path:
    topo._check(src)
    topo._check(dst)
    if src == dst:
        return ()
    if topo.node_of(src) == topo.node_of(dst):
        return (LinkClass.NVLINK,)
    if topo.local_rank(src) == topo.local_rank(dst):
        return SAME_RAIL
    return CROSS_RAIL


def transfer_time(topo: Topology, path: Path, nbytes: float) -> float:
    """Uncontended seconds: summed hop latency plus bytes over the bottleneck."""
    if nbytes < 0:
        raise ValueError("bytes must be non-negative")
    if not path:
        return 0.0
    links = [topo.links[LinkClass(h)] for h in path]
    return sum(l.latency for l in links) + nbytes / min(l.bandwidth for l in links)


def transfer_ns(topo: Topology, path: Path, nbytes: int) -> int:
    """Same model in whole nanoseconds (rounded up), computed exactly."""
    if nbytes < 0:
        raise ValueError("bytes must be non-negative")
    if not path:
        return 0
    links = [topo.links[LinkClass(h)] for h in path]
    latency = sum(_exact(l.latency) for l in links)
    bandwidth = min(_exact(l.bandwidth) for l in links)
    return math.ceil((latency + Fraction(nbytes) / bandwidth) * 10**9)


def link_ns(topo: Topology, link: LinkClass, nbytes: int) -> int:
    return transfer_ns(topo, (LinkClass(link),), nbytes)
