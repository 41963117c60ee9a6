from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def substream(key: int, *ids: int) -> np.random.Generator:
    """Deterministic generator for one task, independent of worker count."""
    return np.random.default_rng(np.random.SeedSequence([key, *ids]))


def next_key(rng: np.random.Generator) -> int:
    """Draw the per-sweep key that all task substreams derive from."""
    return int(rng.integers(0, 2**63 - 1))


class WorkerPool:
    """Thin wrapper over a thread pool; runs inline with a single worker."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.workers > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.workers)

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """Apply fn to every item, preserving input order."""
        if self._executor is None:
            return [fn(item) for item in items]
        return list(self._executor.map(fn, items))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc_info):
        self.close()
