"""Order-preserving worker pool capped by ``CUTSWAP_THREADS``."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

LOGGER = logging.getLogger(__name__)

THREADS_ENV = "CUTSWAP_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Return the worker cap from the environment, defaulting to the CPU count."""
    fallback = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return fallback
    try:
        value = int(raw)
    except ValueError:
        LOGGER.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
        return fallback
    return max(1, value)


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """Apply ``func`` to every item and return results in input order.

    Results are collected by position, never by completion time, so the
    output is independent of scheduling.
    """
    materialized = list(items)
    limit = worker_count() if workers is None else max(1, workers)
    if limit == 1 or len(materialized) <= 1:
        return [func(item) for item in materialized]
    with ThreadPoolExecutor(max_workers=min(limit, len(materialized))) as pool:
        return list(pool.map(func, materialized))
