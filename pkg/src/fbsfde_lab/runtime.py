"""Worker-pool plumbing.

The thread cap only changes how path chunks are scheduled, never the chunking
itself, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_CHUNK = 8192  # fixed chunk size; independent of the worker count on purpose

_max_threads: int | None = None


def max_threads() -> int:
    """Current worker cap (env FBSFDE_LAB_THREADS, overridable via set_max_threads)."""
    if _max_threads is not None:
        return _max_threads
    raw = os.environ.get("FBSFDE_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def set_max_threads(n: int | None) -> None:
    global _max_threads
    _max_threads = None if n is None else max(1, int(n))


def path_chunks(n_items: int, chunk: int = _CHUNK):
    """Deterministic [start, stop) chunk bounds over n_items."""
    return [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]


def run_chunked(fn, n_items: int, chunk: int = _CHUNK) -> None:
    """Call fn(start, stop) for every chunk, possibly on a thread pool.

    fn must write to disjoint output slices; chunk bounds do not depend on the
    worker count, so the result is identical for any number of threads.
    """
    bounds = path_chunks(n_items, chunk)
    workers = min(max_threads(), len(bounds))
    if workers <= 1:
        for s, e in bounds:
            fn(s, e)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda b: fn(*b), bounds))
