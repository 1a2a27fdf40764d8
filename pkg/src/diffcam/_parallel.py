"""Worker-count plumbing shared by the chunked per-pixel kernels."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads: int | None = None


def set_threads(n: int | None) -> None:
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get("DIFFCAM_THREADS")
    if env:
        return max(1, int(env))
    return 1


def chunk_bounds(n: int, chunk: int):
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def run_chunks(fn, bounds, threads: int | None = None) -> None:
    """Call ``fn(start, stop)`` for every chunk.

    ``fn`` must write disjoint output slices, so the result never depends
    on the worker count or scheduling order.
    """
    threads = get_threads() if threads is None else threads
    if threads <= 1 or len(bounds) <= 1:
        for start, stop in bounds:
            fn(start, stop)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for fut in [pool.submit(fn, s, e) for s, e in bounds]:
            fut.result()
