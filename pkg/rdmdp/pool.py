"""Replica worker pool."""

import logging
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from rdmdp.exceptions import ConfigError, RdmdpError

logger = logging.getLogger(__name__)

T = TypeVar("T")


def worker_count(workers: int | str | None = None) -> int:
    """Resolve the worker count from an explicit value, RDMDP_WORKERS, or the CPU count."""
    raw = workers if workers is not None else os.getenv("RDMDP_WORKERS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        count = int(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"RDMDP_WORKERS must be a positive integer, got {raw!r}") from e
    if count < 1:
        raise ConfigError(f"RDMDP_WORKERS must be a positive integer, got {count}")
    return count


def get_pool(workers: int | str | None = None) -> ThreadPoolExecutor:
    """
    Initialize and return a bounded thread pool for replica fan-out.

    The event loop releases the GIL, so threads run replicas in parallel.

    Args:
        workers: Explicit worker count; falls back to RDMDP_WORKERS.

    Returns:
        A ThreadPoolExecutor sized to the resolved worker count.
    """
    count = worker_count(workers)
    logger.debug(f"replica pool with {count} worker(s)")
    return ThreadPoolExecutor(max_workers=count, thread_name_prefix="rdmdp-replica")


def map_replicas(
    fn: Callable[[int], T], replicas: Iterable[int], workers: int | str | None = None
) -> list[T]:
    """Run fn(replica) for every index and return results in index order."""
    indices = list(replicas)
    if not indices:
        return []
    with get_pool(workers) as pool:
        try:
            return list(pool.map(fn, indices))
        except RdmdpError as e:
            logger.error(f"replica failed: {e}")
            raise
