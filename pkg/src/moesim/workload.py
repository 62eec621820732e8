"""Synthetic routing traces and multi-task loads.

Traces are drawn with numpy's Philox4x64-10 counter-based generator
(``numpy.random.Generator(numpy.random.Philox(seed))``). Uniform doubles
are consumed in C order over ``(step, rank, token)``; each token picks the
first expert ``e`` whose running weight sum exceeds ``u * total`` where the
weights are ``(e + 1) ** -skew`` summed left to right. This exact recipe is
what makes traces reproducible across implementations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RoutingTrace:
    """Token counts indexed ``counts[step, rank, expert]``."""

    counts: np.ndarray
    tokens_per_rank: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 3:
            raise ValueError("counts must have shape (steps, ranks, experts)")
        if (counts < 0).any():
            raise ValueError("token counts must be non-negative")
        if counts.size and not (counts.sum(axis=2) == self.tokens_per_rank).all():
            raise ValueError("every (step, rank) row must sum to tokens_per_rank")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def steps(self) -> int:
        return self.counts.shape[0]

    @property
    def ranks(self) -> int:
        return self.counts.shape[1]

    @property
    def experts(self) -> int:
        return self.counts.shape[2]

    def expert_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(0, 1))

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "ranks": self.ranks,
            "experts": self.experts,
            "tokens_per_rank": self.tokens_per_rank,
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoutingTrace":
        counts = np.asarray(data["counts"], dtype=np.int64)
        expected = (data["steps"], data["ranks"], data["experts"])
        if counts.size == 0:
            counts = counts.reshape(expected)
        if counts.shape != expected:
            raise ValueError(f"counts shape {counts.shape} does not match header {expected}")
        return cls(counts=counts, tokens_per_rank=data["tokens_per_rank"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RoutingTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TaskLoad:
    batch_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(b) for b in self.batch_sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("every task needs a batch size >= 1")
        object.__setattr__(self, "batch_sizes", sizes)


def expert_popularity(experts: int, skew: float) -> np.ndarray:
    """Running (unnormalized) weight sums for a Zipf(skew) popularity."""
    weights = np.arange(1, experts + 1, dtype=np.float64) ** (-float(skew))
    return np.cumsum(weights)


def gen_trace(seed: int, steps: int, ranks: int, experts: int,
              tokens_per_rank: int, skew: float = 0.0) -> RoutingTrace:
    if experts < 1:
        raise ValueError("experts must be >= 1")
    if tokens_per_rank < 0 or steps < 0 or ranks < 0:
        raise ValueError("steps, ranks and tokens_per_rank must be non-negative")
    if skew < 0:
        raise ValueError("skew must be >= 0")

    cum = expert_popularity(experts, skew)
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random((steps, ranks, tokens_per_rank))
    choice = np.searchsorted(cum, u * cum[-1], side="right")
    np.minimum(choice, experts - 1, out=choice)

    counts = np.zeros((steps, ranks, experts), dtype=np.int64)
    for s in range(steps):
        for r in range(ranks):
            counts[s, r] = np.bincount(choice[s, r], minlength=experts)
    return RoutingTrace(counts=counts, tokens_per_rank=tokens_per_rank)


def imbalance_ratio(trace: RoutingTrace) -> float:
    totals = trace.expert_totals()
    total = int(totals.sum())
    if total == 0:
        raise ValueError("imbalance is undefined for an empty trace")
    return float(totals.max() * trace.experts / total)
