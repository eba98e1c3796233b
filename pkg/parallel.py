"""
Ordered thread-pool mapping for scans, ensembles and sampler chains
Results always come back in input order, whatever the worker count
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from config import Config

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(max_workers: Optional[int] = None) -> int:
    """Worker count honoring JUNGLE_THREADS as an upper bound"""
    cap = max(1, Config.THREADS)
    if max_workers is None:
        return cap
    return max(1, min(int(max_workers), cap))


def run_ordered(fn: Callable[[T], R], items: Iterable[T], max_workers: Optional[int] = None,
                thread_name_prefix: str = "jungle") -> List[R]:
    """Map fn over items on a thread pool, preserving input order"""
    items = list(items)
    workers = min(resolve_workers(max_workers), max(1, len(items)))

    if workers == 1:
        return [fn(item) for item in items]

    logger.debug(f"Running {len(items)} tasks on {workers} workers ({thread_name_prefix})")
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix=thread_name_prefix) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]
