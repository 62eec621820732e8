"""
A hit-count CPU cache with periodic decay
=========================================

Expert blocks are served from a small CPU cache in front of SSD. Popular
blocks collect hits; a full cache evicts its coldest block only when that
block has earned at least ``threshold`` hits, otherwise the newcomer is
streamed straight from SSD. Every ``k`` steps all counts shrink by ``beta``
so yesterday's favourites can be displaced.
"""
from collections import Counter

from moesim import CacheParams, CPUCache, gen_trace

trace = gen_trace(seed=1, steps=40, ranks=1, experts=32, tokens_per_rank=64, skew=1.1)
print("tokens per expert (first 8):", trace.expert_totals()[:8])


def replay(params):
    cache = CPUCache(params)
    seen = Counter()
    for step in range(trace.steps):
        for expert in range(trace.experts):
            if trace.counts[step, 0, expert]:
                seen[cache.access(expert).kind.value] += 1
        cache.end_step()
    return seen


for label, params in [
    ("no decay      ", CacheParams(cpu_size=8, threshold=1, beta=1.0, k=1)),
    ("halve every 4 ", CacheParams(cpu_size=8, threshold=1, beta=0.5, k=4)),
    ("threshold 3   ", CacheParams(cpu_size=8, threshold=3, beta=1.0, k=1)),
]:
    seen = replay(params)
    total = sum(seen.values())
    print(f"{label} hit rate {seen['CacheHit'] / total:5.1%}  {dict(sorted(seen.items()))}")
