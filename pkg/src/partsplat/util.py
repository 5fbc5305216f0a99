"""Small shared helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def max_threads() -> int:
    """Parallelism cap from PAMO_THREADS (default 1 = serial)."""
    try:
        return max(1, int(os.environ.get("PAMO_THREADS", "1")))
    except ValueError:
        return 1


def thread_map(fn, items):
    """Map preserving order; runs on a thread pool when PAMO_THREADS > 1.

    Results are identical to the serial path: items are independent and
    outputs are collected by index.
    """
    items = list(items)
    n = max_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
