"""Small shared helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "ADVR_THREADS"


def thread_count() -> int:
    """Worker cap from the ADVR_THREADS env var; defaults to 1 (serial)."""
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn, items):
    """Map preserving order; uses a thread pool only when ADVR_THREADS > 1.

    Results are collected by index, so the output is identical to the serial
    path regardless of scheduling.
    """
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
