"""Small shared helpers: ratio rounding, row normalization, thread pools."""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DegenerateVectorError, ValidationError

THREADS_ENV_VAR = "UNICOM_THREADS"


def ratio_count(total: int, ratio: float) -> int:
    """Number of items selected by a fractional ratio, round-to-nearest."""
    return int(round(total * ratio))


def unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """L2-normalize each row, raising if any row has norm below `eps`."""
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < eps):
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(f"row {bad} has norm {norms[bad]:.3e}")
    return x / norms[:, None]


def resolve_threads(requested: int | None) -> int:
    """Thread count from an explicit request or the UNICOM_THREADS variable."""
    if requested is not None:
        n = int(requested)
    else:
        n = int(os.environ.get(THREADS_ENV_VAR, "1"))
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return n


def map_row_chunks(fn, n_items: int, threads: int = 1) -> list:
    """Apply fn(start, stop) over contiguous chunks of [0, n_items).

    Results are returned in chunk order, so any concatenation performed by
    the caller is bitwise independent of the number of worker threads used
    to evaluate the chunks.
    """
    threads = max(1, int(threads))
    if threads == 1 or n_items <= 1:
        return [fn(0, n_items)]
    n_chunks = min(threads, n_items)
    bounds = np.linspace(0, n_items, n_chunks + 1, dtype=int)
    spans = [(int(bounds[i]), int(bounds[i + 1])) for i in range(n_chunks)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, a, b) for a, b in spans]
        return [f.result() for f in futures]
