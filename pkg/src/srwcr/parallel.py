"""Fixed-partition chunk execution.

Work is split into a number of chunks that does not depend on the worker
count; every chunk writes a disjoint output slice.  Results are therefore
bitwise identical for any number of workers.  Kernels are compiled with
``nogil=True`` so threads run concurrently.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def chunk_bounds(n: int, n_chunks: int) -> list[tuple[int, int]]:
    n_chunks = max(1, min(n_chunks, n))
    step, extra = divmod(n, n_chunks)
    bounds, start = [], 0
    for c in range(n_chunks):
        stop = start + step + (1 if c < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def run_chunks(fn, n: int, workers: int = 1, n_chunks: int = 64) -> None:
    """Call ``fn(start, stop)`` over a fixed partition of ``range(n)``."""
    bounds = chunk_bounds(n, n_chunks)
    if workers <= 1 or len(bounds) == 1:
        for b in bounds:
            fn(*b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for fut in [pool.submit(fn, *b) for b in bounds]:
            fut.result()


def physical_cores() -> int:
    try:
        import psutil

        n = psutil.cpu_count(logical=False)
        if n:
            return int(n)
    except ImportError:
        pass
    return os.cpu_count() or 1
