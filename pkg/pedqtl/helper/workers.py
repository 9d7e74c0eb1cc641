"""
Worker pool and progress bars shared by the SNP scan, kinship accumulation,
batch traits and simulation replicates.
Results always come back in submission order so that reductions are
reproducible regardless of the thread count.
"""

import sys
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_progress_enabled = True
_progress_lock = threading.Lock()


def enable_progress_bars() -> None:
    global _progress_enabled
    with _progress_lock:
        _progress_enabled = True


def disable_progress_bars() -> None:
    global _progress_enabled
    with _progress_lock:
        _progress_enabled = False


def progress_bars_enabled() -> bool:
    return _progress_enabled and sys.stderr.isatty()


def map_ordered(
    fn: Callable[[T], R],
    items: Iterable[T],
    threads: int = 1,
    desc: Optional[str] = None,
    total: Optional[int] = None,
    unit: str = "it",
) -> List[R]:
    """
    Apply fn to every item, in parallel when threads > 1

    Args:
        fn: Function applied to each item
        items: Work items; consumed lazily by the pool
        threads: Number of worker threads (1 runs inline)
        desc: Progress bar label; no bar when None
        total: Item count for the progress bar
        unit: Progress bar unit

    Returns:
        Results in the order the items were given
    """
    if total is None and isinstance(items, Sequence):
        total = len(items)

    bar = None
    if desc is not None:
        bar = tqdm(total=total, desc=desc, unit=unit, disable=not progress_bars_enabled(), leave=False)

    results: List[R] = []
    try:
        if threads <= 1:
            for item in items:
                results.append(fn(item))
                if bar is not None:
                    bar.update(1)
        else:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                for result in executor.map(fn, items):
                    results.append(result)
                    if bar is not None:
                        bar.update(1)
    finally:
        if bar is not None:
            bar.close()
    return results


def split_budget(threads: int, outer_items: int) -> tuple:
    """
    Split a thread budget between an outer loop and the work inside it

    Returns:
        (outer_threads, inner_threads) with outer * inner <= threads
    """
    threads = max(1, int(threads))
    outer = max(1, min(threads, outer_items))
    inner = max(1, threads // outer)
    return outer, inner
