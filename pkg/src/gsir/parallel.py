"""Worker-pool helpers.

The number of workers is capped by the GSIR_THREADS environment variable.
All parallel loops in this package partition work into disjoint output
regions, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor

_pool_lock = threading.Lock()
_pool: ThreadPoolExecutor | None = None
_pool_size = 0


def worker_count(requested: int | None = None) -> int:
    """Resolve the effective worker count (>= 1)."""
    cap = os.environ.get("GSIR_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)


def _shared_pool(w: int) -> ThreadPoolExecutor:
    global _pool, _pool_size
    with _pool_lock:
        if _pool is None or _pool_size < w:
            if _pool is not None:
                _pool.shutdown(wait=True)
            _pool = ThreadPoolExecutor(max_workers=w)
            _pool_size = w
        return _pool


def run_chunks(fn, n_items: int, workers: int | None = None) -> None:
    """Call ``fn(start, stop)`` over a partition of ``range(n_items)``.

    ``fn`` must write only to output slots owned by its items; under that
    contract the result does not depend on the partition.
    """
    w = worker_count(workers)
    if n_items == 0:
        return
    if w <= 1 or n_items == 1:
        fn(0, n_items)
        return
    w = min(w, n_items)
    bounds = [round(i * n_items / w) for i in range(w + 1)]
    pool = _shared_pool(w)
    futures = [pool.submit(fn, bounds[i], bounds[i + 1]) for i in range(w)]
    for f in futures:
        f.result()
