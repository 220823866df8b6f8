"""Thread-pool map for independent tasks (ladder rungs, multiplier candidates).

The compiled kernels release the GIL, so threads give real parallelism
there. ``VARLAB_THREADS`` caps the worker count; results keep input order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("VARLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"VARLAB_THREADS must be an integer, got {env!r}") from None
    return max(1, os.cpu_count() or 1)


def pmap(fn, items, threads: int | None = None) -> list:
    items = list(items)
    workers = min(worker_count(threads), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
