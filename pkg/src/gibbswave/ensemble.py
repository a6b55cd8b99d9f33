"""
Reproducible ensembles: per-trajectory random streams and ordered parallel maps.

Every random draw in an experiment comes from a stream keyed by
``(master_seed, purpose, tag, trajectory_index)``. Streams are Philox
generators seeded through :class:`numpy.random.SeedSequence` spawn keys,
so a trajectory's numbers never depend on which worker ran it or on how
many workers there were. Work is split into chunks of a fixed size (part
of the configuration, since BLAS results for a batch can depend on the
batch shape) and gathered back in index order.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np


def _purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def stream(master_seed: int, purpose: str, index: int, tag: int = 0) -> np.random.Generator:
    """Independent generator for one trajectory and one use."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(_purpose_id(purpose), int(tag), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def streams(master_seed: int, purpose: str, indices: Sequence[int], tag: int = 0) -> list:
    return [stream(master_seed, purpose, i, tag) for i in indices]


def chunk_ranges(n: int, chunk_size: int) -> list:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [range(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]


def ordered_map(task: Callable, n: int, chunk_size: int, workers: int = 1) -> list:
    """Run ``task(indices)`` over fixed chunks; results come back in index order."""
    chunks = chunk_ranges(n, chunk_size)
    if workers <= 1 or len(chunks) == 1:
        return [task(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, chunks))


def gather(results: list):
    """Concatenate per-chunk results along the trajectory axis.

    Each chunk result is an array or a dict of arrays with the trajectory
    index first.
    """
    if isinstance(results[0], dict):
        return {k: np.concatenate([r[k] for r in results], axis=0) for k in results[0]}
    return np.concatenate(results, axis=0)


class BlockNoise:
    """Step noise for a chunk of trajectories, drawn from per-trajectory streams.

    Each trajectory's stream is consumed in blocks of ``block`` steps, so the
    sequence seen by a trajectory is fixed by its stream alone.
    """

    def __init__(self, rngs: list, shape: tuple, block: int = 100):
        self.rngs = rngs
        self.shape = tuple(shape)
        self.block = block
        self._buf = None
        self._pos = block

    def __call__(self) -> np.ndarray:
        if self._pos == self.block:
            self._buf = np.stack([g.standard_normal((self.block,) + self.shape) for g in self.rngs], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def mean_and_error(values: np.ndarray, axis: int = 0) -> tuple:
    """Sample mean, variance (ddof=1), and standard error along ``axis``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    var = np.var(values, axis=axis, ddof=1) if n > 1 else np.zeros_like(np.mean(values, axis=axis))
    return np.mean(values, axis=axis), var, np.sqrt(var / n)
