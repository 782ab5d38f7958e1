"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def aps_scores_batch(probs: np.ndarray) -> np.ndarray:
    order = np.argsort(-probs, axis=1, kind="stable")
    cums = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    out = np.empty_like(probs)
    np.put_along_axis(out, order, cums, axis=1)
    return out


def wsc_min_windows(sorted_hits: np.ndarray, min_count: int):
    D, n = sorted_hits.shape
    prefix = np.zeros((D, n + 1), dtype=np.int64)
    np.cumsum(sorted_hits, axis=1, out=prefix[:, 1:])
    best_h = np.full(D, -1, dtype=np.int64)
    best_L = np.ones(D, dtype=np.int64)
    for L in range(min_count, min(2 * min_count - 1, n) + 1):
        s = (prefix[:, L:] - prefix[:, :-L]).min(axis=1)
        better = (best_h < 0) | (s * best_L < best_h * L)
        best_h = np.where(better, s, best_h)
        best_L = np.where(better, L, best_L)
    return best_h, best_L
