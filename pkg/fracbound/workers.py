import atexit
import logging
import os
from collections.abc import Callable, Sequence
from multiprocessing import get_context
from multiprocessing.pool import Pool
from threading import RLock
from typing import Any, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

Task = TypeVar("Task")
Result = TypeVar("Result")

# Fixed number of paths per block. Blocks (and therefore random streams)
# never depend on the number of workers
DEFAULT_BLOCK_SIZE = 1000

STREAM_SUBORDINATOR = 0
STREAM_BROWNIAN = 1
STREAM_BRIDGE = 2
STREAM_CTRW = 3
STREAM_PATH = 4


class RandomStreams:
    """
    Splittable source of random generators: one independent PCG64 stream
    per (purpose, block index), derived from a single user seed
    """

    def __init__(self, seed: int) -> None:
        super().__init__()
        if seed < 0:
            raise ValueError("Seeds must be nonnegative")
        self._seed = int(seed)

    def __repr__(self) -> str:
        return f"RandomStreams(seed={self._seed})"

    def get_seed(self) -> int:
        return self._seed

    def generator(self, purpose: int, block: int) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            self._seed, spawn_key=(purpose, block)
        )
        return np.random.Generator(np.random.PCG64(sequence))


def split_blocks(
    total: int, block_size: int = DEFAULT_BLOCK_SIZE
) -> list[tuple[int, int]]:
    """
    Returns (block index, size) pairs covering `total` paths
    """
    if total <= 0:
        return []
    blocks = []
    for index, start in enumerate(range(0, total, block_size)):
        blocks.append((index, min(block_size, total - start)))
    return blocks


def resolve_threads(threads: int) -> int:
    if threads < 0:
        raise ValueError("Thread count must be nonnegative")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def _terminate(pool: Pool | None) -> None:
    if pool is not None:
        pool.terminate()


class WorkerPool:
    """
    Runs block functions either inline or in spawned worker processes.
    Results always come back in task order so that reductions are
    deterministic whatever the worker count.
    """

    def __init__(self, threads: int = 1) -> None:
        super().__init__()
        self._lock = RLock()
        self._threads = resolve_threads(threads)
        self._pool: Pool | None = None
        self._killer: Callable[[], None] | None = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *args: Any) -> None:
        self.close()

    def get_threads(self) -> int:
        return self._threads

    def _get_pool(self) -> Pool:
        with self._lock:
            if self._pool is None:
                context = get_context("spawn")
                self._pool = context.Pool(processes=self._threads)
                # Keep a reference to be able to unregister it on close
                pool = self._pool
                self._killer = lambda: _terminate(pool)
                atexit.register(self._killer)
                logger.debug(f"Spawned {self._threads} worker processes")
            return self._pool

    def map(
        self, function: Callable[[Task], Result], tasks: Sequence[Task]
    ) -> list[Result]:
        if self._threads == 1 or len(tasks) <= 1:
            return [function(task) for task in tasks]
        return self._get_pool().map(function, tasks, chunksize=1)

    def close(self) -> None:
        with self._lock:
            if self._pool is not None:
                self._pool.close()
                self._pool.join()
                self._pool = None
            if self._killer is not None:
                atexit.unregister(self._killer)
                self._killer = None
