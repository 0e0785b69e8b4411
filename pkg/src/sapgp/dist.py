"""Worker-pool partitioned kernel products with a fixed reduction order.

Partial products are always computed at a fixed tile granularity and combined
in ascending tile order, so a product is bit-identical for every worker
count: changing ``num_workers`` only changes which tiles each worker executes,
never the arithmetic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ContractError, WorkerError

# Column/row tile width; also the unit of work handed to the pool.
TILE = 256


def partition(size, parts):
    """Split ``range(size)`` into ``parts`` contiguous ranges, sizes differing
    by at most one. Returns a list of (start, stop) pairs covering [0, size)."""
    if size < 0 or parts < 1:
        raise ContractError("partition needs size >= 0 and parts >= 1")
    parts = min(parts, max(size, 1))
    base, extra = divmod(size, parts)
    ranges = []
    start = 0
    for i in range(parts):
        stop = start + base + (1 if i < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


def tile_ranges(size):
    """The fixed tile decomposition of ``range(size)`` (worker-count free)."""
    return partition(size, max(1, math.ceil(size / TILE)))


class WorkerPool:
    """Thread pool executing whole tiles; results reduced in tile order."""

    def __init__(self, num_workers=1):
        if int(num_workers) < 1:
            raise ContractError("num_workers must be >= 1")
        self.num_workers = int(num_workers)
        self._executor = None

    def _ensure_executor(self):
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.num_workers)
        return self._executor

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _run_ordered(pool, count, task):
    """Evaluate ``task(i)`` for i in 0..count-1, returning results in order.

    Workers receive contiguous groups of tile indices; a failing group aborts
    the whole call.
    """
    if pool is None or pool.num_workers == 1 or count <= 1:
        return [task(i) for i in range(count)]
    groups = partition(count, min(pool.num_workers, count))
    executor = pool._ensure_executor()

    def run_group(grp):
        start, stop = grp
        return [task(i) for i in range(start, stop)]

    futures = [executor.submit(run_group, grp) for grp in groups]
    results = []
    for worker_id, fut in enumerate(futures):
        try:
            results.extend(fut.result())
        except Exception as exc:  # abort, naming the worker
            for other in futures:
                other.cancel()
            raise WorkerError(f"worker {worker_id} failed: {exc}") from exc
    return results


def check_indices(block, n):
    """Validate a row-index block: in range, no duplicates."""
    block = np.asarray(block, dtype=np.intp).ravel()
    if block.size == 0:
        raise ContractError("empty index block")
    if block.min() < 0 or block.max() >= n:
        raise ContractError("block index out of range")
    if np.unique(block).size != block.size:
        raise ContractError("duplicate index in block")
    return block


def col_dist_matmul(oracle, W, block, pool=None):
    """K[block, :] @ W via column tiles, summed in ascending tile order."""
    n = oracle.n
    block = check_indices(block, n)
    W = np.asarray(W, dtype=np.float64)
    vector = W.ndim == 1
    W2 = W[:, None] if vector else W
    if W2.shape[0] != n:
        raise ContractError("W must have n rows")
    tiles = tile_ranges(n)

    def task(i):
        start, stop = tiles[i]
        return oracle.tile(block, np.arange(start, stop)) @ W2[start:stop]

    parts = _run_ordered(pool, len(tiles), task)
    out = np.zeros((block.size, W2.shape[1]))
    for part in parts:
        out += part
    return out[:, 0] if vector else out


def row_dist_matmul(oracle, omega, block, pool=None):
    """K[block, block] @ omega via row tiles, concatenated in tile order."""
    n = oracle.n
    block = check_indices(block, n)
    omega = np.asarray(omega, dtype=np.float64)
    vector = omega.ndim == 1
    om2 = omega[:, None] if vector else omega
    if om2.shape[0] != block.size:
        raise ContractError("omega must have one row per block index")
    tiles = tile_ranges(block.size)

    def task(i):
        start, stop = tiles[i]
        return oracle.tile(block[start:stop], block) @ om2

    parts = _run_ordered(pool, len(tiles), task)
    out = np.vstack(parts)
    return out[:, 0] if vector else out
