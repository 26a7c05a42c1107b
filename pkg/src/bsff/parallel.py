"""Deterministic intra-batch data parallelism.

Work is cut into fixed-size chunks of samples; worker threads may compute
chunks in any order but results are always reduced in chunk order, and BLAS
is pinned to one thread inside the parallel region, so every count and
float is bit-identical no matter how many workers run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits

CHUNK = 16


def chunk_slices(n: int, chunk: int = CHUNK):
    return [slice(start, min(start + chunk, n)) for start in range(0, n, chunk)]


def run_chunks(fn, n: int, workers: int = 1, chunk: int = CHUNK):
    """Apply ``fn(slice)`` over fixed chunks of range(n), results in order."""
    slices = chunk_slices(n, chunk)
    with threadpool_limits(limits=1):
        if workers <= 1 or len(slices) <= 1:
            return [fn(sl) for sl in slices]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, slices))
