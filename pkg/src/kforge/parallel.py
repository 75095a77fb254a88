"""
Order-preserving data-parallel map for per-page work.
"""

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """
    Apply ``fn`` to every item, returning results in input order.

    ``fn`` and the items must be picklable when ``jobs > 1``.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        chunksize = max(1, len(items) // (jobs * 4))
        return list(pool.map(fn, items, chunksize=chunksize))
