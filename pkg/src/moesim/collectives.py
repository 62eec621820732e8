"""Collective data movement with timing lowering onto the event engine.

Payloads are square ``R x R`` nested lists where ``payload[src][dst]`` is the
block ``src`` addresses to ``dst``. After an AlltoAll, ``out[i][j]`` is the
block that rank ``j`` sent to rank ``i``, so receivers see blocks ordered by
global source rank.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .engine import Engine
from .topology import LinkClass, Topology, route


def _check_square(payload) -> int:
    n = len(payload)
    for row in payload:
        if len(row) != n:
            raise ValueError(f"payload must be square, got a row of {len(row)} for {n} ranks")
    return n


def _nbytes(block) -> int:
    if block is None:
        return 0
    if hasattr(block, "nbytes"):
        return int(block.nbytes)
    return len(block)


def alltoall_flat(payload):
    n = _check_square(payload)
    return [[payload[src][dst] for src in range(n)] for dst in range(n)]


@dataclass(frozen=True)
class Transfer:
    phase: int
    src: int
    dst: int
    nbytes: int
    path: tuple
    blocks: tuple = ()  # (origin, final destination) pairs carried


def flat_transfers(payload, topology: Topology) -> list[Transfer]:
    n = _check_square(payload)
    if n != topology.num_gpus:
        raise ValueError(f"payload has {n} ranks, topology has {topology.num_gpus} GPUs")
    return [
        Transfer(1, s, d, _nbytes(payload[s][d]), route(topology, s, d), ((s, d),))
        for s in range(n) for d in range(n)
    ]


def alltoall_hierarchical(payload, topology: Topology, transfers: list | None = None):
    """Two-phase AlltoAll that never crosses rails.

    Phase 1: inside every node, GPU ``a`` hands GPU ``b`` all blocks bound
    for local rank ``b`` on any node (NVLink only). Phase 2: GPUs of equal
    local rank run an AlltoAll among nodes over their own rail. Pass a list
    as ``transfers`` to collect the :class:`Transfer` records of both phases.
    """
    n = _check_square(payload)
    g = topology.gpus_per_node
    if n != topology.num_gpus:
        raise ValueError(f"payload has {n} ranks, topology has {topology.num_gpus} GPUs")
    nodes = topology.nodes
    log = transfers if transfers is not None else []

    # staging[gpu] holds {(origin, final_dst): block}
    staging = [dict() for _ in range(n)]
    for node in range(nodes):
        for a in range(g):
            src = node * g + a
            for b in range(g):
                hop = node * g + b
                carried = {(src, m * g + b): payload[src][m * g + b] for m in range(nodes)}
                staging[hop].update(carried)
                log.append(Transfer(1, src, hop, sum(_nbytes(v) for v in carried.values()),
                                    route(topology, src, hop), tuple(carried)))

    inbox = [dict() for _ in range(n)]
    for node in range(nodes):
        for b in range(g):
            holder = node * g + b
            for m in range(nodes):
                dst = m * g + b
                carried = {k: v for k, v in staging[holder].items() if k[1] == dst}
                inbox[dst].update(carried)
                log.append(Transfer(2, holder, dst, sum(_nbytes(v) for v in carried.values()),
                                    route(topology, holder, dst), tuple(sorted(carried))))

    return [[inbox[dst][(src, dst)] for src in range(n)] for dst in range(n)]


def hierarchical_transfers(payload, topology: Topology) -> list[Transfer]:
    log: list[Transfer] = []
    alltoall_hierarchical(payload, topology, log)
    return log


def spin_hops(transfers: Sequence[Transfer]) -> int:
    return sum(1 for t in transfers for hop in t.path if hop == LinkClass.SPIN)


def channel_for(topology: Topology, src: int, dst: int, path) -> str:
    """Serialized network resource a transfer occupies.

    NVSwitch is non-blocking, so intra-node traffic queues on the sender's
    NVLink egress. Same-rail traffic shares its rail; all cross-rail traffic
    shares the spine.
    """
    if not path:
        return f"local{src}"
    if LinkClass.SPIN in path:
        return "spine"
    if path[0] == LinkClass.NVLINK:
        return f"nvlink{src}"
    return f"rail{topology.local_rank(src)}"


def lower_transfers(engine: Engine, transfers: Sequence[Transfer], deps=(), *,
                    skip_local: bool = True, label: str = "a2a") -> dict:
    """Submit transfers as network tasks; phase 2 waits on the phase-1 inputs of its sender.

    Returns ``{"tasks": [...], "done": id}`` where ``done`` is a zero-length
    barrier after the last transfer.
    """
    topo = engine.topology
    ids = []
    arrivals: dict[int, list] = {}
    for t in transfers:
        if skip_local and not t.path:
            continue
        tdeps = list(deps)
        if t.phase == 2:
            tdeps += arrivals.get(t.src, [])
        tid = engine.submit(
            channel_for(topo, t.src, t.dst, t.path), nbytes=t.nbytes, path=t.path,
            deps=tdeps, kind="net", name=f"{label}.p{t.phase} {t.src}->{t.dst}",
            meta={"phase": t.phase},
        )
        ids.append(tid)
        if t.phase == 1:
            arrivals.setdefault(t.dst, []).append(tid)
    done = engine.submit("barrier", 0, deps=ids or list(deps), kind="sync", name=f"{label}.done")
    return {"tasks": ids, "done": done}


def allgather(slices: Sequence):
    """Every rank ends with all slices concatenated in rank order."""
    if any(s is None for s in slices):
        missing = [i for i, s in enumerate(slices) if s is None]
        raise ValueError(f"missing slice for rank(s) {missing}")
    full = b"".join(bytes(s) for s in slices)
    return [full for _ in slices]


@dataclass(frozen=True)
class SliceEntry:
    slice_id: int
    offset: int
    length: int


def fuse_slices(slices: Sequence[bytes]) -> tuple[bytes, tuple]:
    if not slices:
        raise ValueError("nothing to fuse")
    index = []
    offset = 0
    for i, s in enumerate(slices):
        index.append(SliceEntry(i, offset, len(s)))
        offset += len(s)
    return b"".join(bytes(s) for s in slices), tuple(index)


def split_blob(blob: bytes, index: Sequence[SliceEntry]) -> list[bytes]:
    expected = 0
    for entry in index:
        if entry.offset != expected or entry.length < 0:
            raise ValueError(f"slice index is not contiguous at slice {entry.slice_id}")
        expected += entry.length
    if expected != len(blob):
        raise ValueError(f"slice index covers {expected} bytes, blob has {len(blob)}")
    return [blob[e.offset:e.offset + e.length] for e in index]


def lower_slice_exchange(engine: Engine, src: int, dst: int, sizes: Sequence[int], *,
                         fused: bool = True, deps=()) -> list:
    """Submit the network tasks that move ``sizes`` slices from ``src`` to ``dst``.

    Fused: one message with the summed size. Unfused: one message per slice,
    each paying the path latency.
    """
    topo = engine.topology
    path = route(topo, src, dst)
    channel = channel_for(topo, src, dst, path)
    if fused:
        return [engine.submit(channel, nbytes=sum(sizes), path=path, deps=deps,
                              kind="net", name=f"fused[{len(sizes)}] {src}->{dst}")]
    return [engine.submit(channel, nbytes=s, path=path, deps=deps, kind="net",
                          name=f"slice{i} {src}->{dst}") for i, s in enumerate(sizes)]


class DuplicateGradientError(ValueError):
    pass


class ForeignGradientError(KeyError):
    pass


class GradBucket:
    """Holds gradients until every registered member has arrived, then flushes once.

    ``push`` returns ``None`` while the bucket is filling and the member ids
    in registration order when the last one arrives.
    """

    def __init__(self, members: Sequence):
        if not members:
            raise ValueError("a bucket needs at least one member")
        if len(set(members)) != len(members):
            raise ValueError("bucket members must be unique")
        self.members = tuple(members)
        self.pending = set(members)
        self.flushed = False

    @property
    def capacity(self) -> int:
        return len(self.members)

    def push(self, grad_id):
        if grad_id not in self.members:
            raise ForeignGradientError(grad_id)
        if grad_id not in self.pending:
            raise DuplicateGradientError(f"gradient {grad_id!r} already pushed")
        self.pending.discard(grad_id)
        if self.pending:
            return None
        self.flushed = True
        return self.members


def assign_buckets(params_forward_order: Sequence, capacity: int) -> list[GradBucket]:
    """Pack parameters into buckets back to front, matching backward arrival."""
    if capacity < 1:
        raise ValueError("bucket capacity must be >= 1")
    rev = list(reversed(params_forward_order))
    return [GradBucket(rev[i:i + capacity]) for i in range(0, len(rev), capacity)]


class BucketSet:
    def __init__(self, params_forward_order: Sequence, capacity: int):
        self.buckets = assign_buckets(params_forward_order, capacity)
        self._owner = {p: b for b in self.buckets for p in b.members}

    def push(self, grad_id):
        if grad_id not in self._owner:
            raise ForeignGradientError(grad_id)
        return self._owner[grad_id].push(grad_id)
