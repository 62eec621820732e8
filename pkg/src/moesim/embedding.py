"""Row-wise embedding partition under data parallelism.

Rank ``r`` owns rows ``[r * V/N, (r + 1) * V/N)`` of a ``[V, H]`` table.
Forward routes every looked-up id to its owner (AlltoAll #1), gathers rows
there and sends them back (AlltoAll #2). Backward ships (id, grad row)
pairs to the owners in one AlltoAll and scatter-adds them, so no AllReduce
over the table is needed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collectives import Transfer, alltoall_flat, lower_transfers
from .engine import Engine
from .topology import route


@dataclass
class EmbShard:
    owner: int
    lo: int
    hi: int
    weight: np.ndarray


@dataclass
class CommCounter:
    alltoall_calls: int = 0
    bytes_moved: int = 0

    def exchange(self, payload):
        self.alltoall_calls += 1
        self.bytes_moved += sum(_payload_bytes(b) for row in payload for b in row)
        return alltoall_flat(payload)


def _payload_bytes(block) -> int:
    if isinstance(block, tuple):
        return sum(_payload_bytes(b) for b in block)
    return int(block.nbytes)


def partition_table(table: np.ndarray, world_size: int) -> list[EmbShard]:
    """Split ``table`` into even contiguous shards, padding V up with zero rows."""
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    table = np.asarray(table)
    vocab, hidden = table.shape
    rows = -(-vocab // world_size)
    padded = np.zeros((rows * world_size, hidden), dtype=table.dtype)
    padded[:vocab] = table
    return [EmbShard(r, r * rows, (r + 1) * rows, padded[r * rows:(r + 1) * rows].copy())
            for r in range(world_size)]


def _layout(shards):
    rows = shards[0].hi - shards[0].lo
    for s in shards:
        if s.hi - s.lo != rows or s.lo != s.owner * rows:
            raise ValueError("shards must be even, contiguous and ordered by owner")
    return rows


def _route_ids(shards, batch, vocab):
    rows = _layout(shards)
    n = len(shards)
    if len(batch) != n:
        raise ValueError(f"batch has {len(batch)} ranks, table has {n} shards")
    send, where = [], []
    for r, ids in enumerate(batch):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"rank {r} looks up an id outside [0, {vocab})")
        owners = ids // rows
        send.append([ids[owners == o] for o in range(n)])
        where.append([np.flatnonzero(owners == o) for o in range(n)])
    return send, where


def forward(shards: Sequence[EmbShard], batch, vocab: int | None = None,
            comm: CommCounter | None = None) -> list[np.ndarray]:
    """Embedding rows for every rank's ids, in the rank's original order."""
    comm = comm if comm is not None else CommCounter()
    vocab = shards[-1].hi if vocab is None else vocab
    n = len(shards)
    hidden = shards[0].weight.shape[1]
    send, where = _route_ids(shards, batch, vocab)

    received = comm.exchange(send)  # received[owner][src]
    looked_up = [[shards[o].weight[received[o][src] - shards[o].lo] for src in range(n)]
                 for o in range(n)]
    returned = comm.exchange(looked_up)  # returned[src][owner]

    out = []
    for r in range(n):
        rows = np.zeros((len(batch[r]), hidden), dtype=shards[0].weight.dtype)
        for o in range(n):
            rows[where[r][o]] = returned[r][o]
        out.append(rows)
    return out


def backward(shards: Sequence[EmbShard], batch, grads, vocab: int | None = None,
             comm: CommCounter | None = None) -> list[np.ndarray]:
    """Per-shard table gradients; repeated ids accumulate by summation."""
    comm = comm if comm is not None else CommCounter()
    vocab = shards[-1].hi if vocab is None else vocab
    n = len(shards)
    hidden = shards[0].weight.shape[1]
    if len(grads) != n:
        raise ValueError("need one gradient matrix per rank")
    for r in range(n):
        if np.shape(grads[r]) != (len(batch[r]), hidden):
            raise ValueError(f"rank {r} gradient has shape {np.shape(grads[r])}, "
                             f"expected {(len(batch[r]), hidden)}")
    send, where = _route_ids(shards, batch, vocab)
    payload = [[(send[r][o], np.asarray(grads[r])[where[r][o]]) for o in range(n)]
               for r in range(n)]
    received = comm.exchange(payload)

    out = []
    for o in range(n):
        g = np.zeros_like(shards[o].weight, dtype=np.result_type(shards[o].weight, *grads))
        for ids, rows in received[o]:
            np.add.at(g, ids - shards[o].lo, rows)
        out.append(g)
    return out


def comm_count(shards, batch, *, with_backward: bool = True) -> int:
    """AlltoAll invocations in one step (forward, plus backward if requested)."""
    comm = CommCounter()
    hidden = shards[0].weight.shape[1]
    forward(shards, batch, comm=comm)
    if with_backward:
        grads = [np.zeros((len(ids), hidden)) for ids in batch]
        backward(shards, batch, grads, comm=comm)
    return comm.alltoall_calls


def shard_bytes(shards) -> list[int]:
    return [int(s.weight.nbytes) for s in shards]


def lower_step(engine: Engine, batch, rows_per_rank: int, hidden: int, *,
               elem_bytes: int = 4, id_bytes: int = 8, deps=()) -> list:
    """Submit the three exchanges of one step; returns the per-exchange barrier ids."""
    topo = engine.topology
    n = len(batch)
    if topo is None or topo.num_gpus != n:
        raise ValueError("engine topology must have one GPU per rank")
    counts = [[0] * n for _ in range(n)]
    for r, ids in enumerate(batch):
        for i in ids:
            counts[r][int(i) // rows_per_rank] += 1
    phases = [
        ("ids", lambda s, d: counts[s][d] * id_bytes),
        ("rows", lambda s, d: counts[d][s] * hidden * elem_bytes),
        ("grads", lambda s, d: counts[s][d] * (hidden * elem_bytes + id_bytes)),
    ]
    done = []
    prev = list(deps)
    for label, size in phases:
        transfers = [Transfer(1, s, d, size(s, d), route(topo, s, d))
                     for s in range(n) for d in range(n)]
        result = lower_transfers(engine, transfers, prev, label=f"emb.{label}")
        prev = [result["done"]]
        done.append(result["done"])
    return done
