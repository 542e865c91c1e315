# experiments/runner.py
"""Parallel evaluation of independent sweep cells."""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed

from django.conf import settings

logger = logging.getLogger(__name__)


def worker_count(cells, threads=None):
    threads = settings.COATSIM_THREADS if threads is None else threads
    return max(1, min(int(threads), len(cells)))


def run_cells(fn, cells, threads=None):
    """
    Evaluate fn(cell) for every cell key, at most COATSIM_THREADS at a time.
    Returns [(cell, result)] sorted by cell key, whatever order cells finished in.
    The first exception raised by a cell propagates.
    """
    cells = sorted(set(cells))
    if not cells:
        return []
    workers = worker_count(cells, threads)
    logger.debug("Running %d cells on %d workers", len(cells), workers)

    if workers == 1:
        return [(cell, fn(cell)) for cell in cells]

    results = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(fn, cell): cell for cell in cells}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return [(cell, results[cell]) for cell in cells]
