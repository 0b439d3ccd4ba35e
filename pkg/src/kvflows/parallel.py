"""Replica-level parallelism with results independent of the worker count.

Work is split into chunks whose boundaries depend only on the problem size,
and results are gathered in chunk order, so a serial run and a pooled run
produce bitwise-identical arrays.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

WORKERS_ENV = "KVFLOWS_WORKERS"


def worker_count(default: int = 1) -> int:
    value = os.environ.get(WORKERS_ENV)
    if value is None:
        return default
    try:
        n = int(value)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {value!r}") from exc
    return max(1, n)


def chunk_ranges(total: int, size: int):
    return [(a, min(a + size, total)) for a in range(0, total, size)]


def map_chunks(fn, tasks, workers=None):
    """``[fn(*t) for t in tasks]``, optionally on a process pool."""
    tasks = list(tasks)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]
