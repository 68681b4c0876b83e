"""Replica-level parallelism over a process pool."""

from __future__ import annotations

import concurrent.futures
import logging
from collections.abc import Callable
from typing import Any, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_CHUNK = 64


def _run_chunk(
    fn: Callable[..., T], start: int, stop: int, args: tuple, kwargs: dict
) -> list[T]:
    return [fn(i, *args, **kwargs) for i in range(start, stop)]


class ReplicaPool:
    """Run ``fn(replica, *args)`` for replica = 0..n-1 and return results in
    replica order.

    Each replica draws from its own seeded stream, so results do not depend
    on ``threads`` or on how chunks are scheduled.  ``threads == 1`` runs
    inline without starting worker processes.
    """

    def __init__(self, threads: int = 1, chunk_size: int = DEFAULT_CHUNK) -> None:
        if threads < 1:
            raise ValueError(f"threads must be at least 1, got: {threads}")
        self.threads = threads
        self.chunk_size = chunk_size
        self._executor: concurrent.futures.ProcessPoolExecutor | None = None

    def __enter__(self) -> ReplicaPool:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _pool(self) -> concurrent.futures.ProcessPoolExecutor:
        if self._executor is None:
            self._executor = concurrent.futures.ProcessPoolExecutor(max_workers=self.threads)
        return self._executor

    def map(self, fn: Callable[..., T], n: int, *args: Any, **kwargs: Any) -> list[T]:
        if n < 0:
            raise ValueError(f"replica count must be nonnegative, got: {n}")
        if self.threads == 1 or n <= self.chunk_size:
            return _run_chunk(fn, 0, n, args, kwargs)
        pool = self._pool()
        bounds = [(s, min(s + self.chunk_size, n)) for s in range(0, n, self.chunk_size)]
        futures = [pool.submit(_run_chunk, fn, s, e, args, kwargs) for s, e in bounds]
        results: list[T] = []
        for future in futures:
            results.extend(future.result())
        logger.debug("replicas completed", extra={"replicas": n, "chunks": len(bounds)})
        return results

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
            self._executor = None
