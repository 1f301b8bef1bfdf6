"""
HOLD Parallel Helpers
=====================
Counter-based random streams and deterministic chunked fan-out.

Work is cut into fixed-size chunks; chunk ``i`` always draws from the Philox
stream keyed by ``(seed, i)``. Results are concatenated in chunk order, so
output is identical for any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

T = TypeVar("T")

DEFAULT_CHUNK = 4096
_MASK64 = (1 << 64) - 1


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, index); Philox key packs both into 128 bits."""
    key = ((int(index) & _MASK64) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def chunk_bounds(n_items: int, chunk: int = DEFAULT_CHUNK) -> List[slice]:
    return [slice(start, min(start + chunk, n_items)) for start in range(0, n_items, chunk)]


def map_chunks(
    fn: Callable[[slice, np.random.Generator], T],
    n_items: int,
    seed: int,
    threads: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> List[T]:
    """
    Apply ``fn(chunk_slice, rng)`` over fixed chunks and return results in chunk order.

    Args:
        fn: Worker receiving the item slice and that chunk's generator
        n_items: Total number of independent items (paths, chains, samples)
        seed: Base seed of the counter-based streams
        threads: Worker threads; 1 runs inline
        chunk: Items per chunk (part of the reproducibility contract)
    """
    slices = chunk_bounds(n_items, chunk)
    jobs = [(sl, stream(seed, i)) for i, sl in enumerate(slices)]
    if threads <= 1 or len(jobs) <= 1:
        return [fn(sl, rng) for sl, rng in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(fn, sl, rng) for sl, rng in jobs]
        return [f.result() for f in futures]
