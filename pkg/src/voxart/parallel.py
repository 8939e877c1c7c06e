"""Worker pool sizing and order-preserving parallel map.

The pool size is capped by the VOXIFY_THREADS environment variable (default 1,
i.e. fully sequential). Results are always reduced in submission order so that
float accumulation is reproducible no matter how many workers run.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_ENV_VAR = "VOXIFY_THREADS"


def worker_count() -> int:
    raw = os.environ.get(_ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{_ENV_VAR} must be an integer, got {raw!r}")
    cpus = os.cpu_count() or 1
    return max(1, min(n, cpus))


def ordered_map(fn, items):
    """Apply fn to each item, in parallel when the pool allows, preserving order."""
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
