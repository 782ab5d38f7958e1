"""Hot-loop dispatch: compiled Cython kernels when built, numpy otherwise.

Set ``EC3_PURE_PYTHON=1`` to force the numpy fallback. Both backends return
identical results; ``BACKEND`` names the one in use.
"""

import os

import numpy as np

from . import _pykernels

_py = _pykernels
_c = None
if not os.environ.get("EC3_PURE_PYTHON"):
    try:
        from . import _ckernels as _c
    except ImportError:
        _c = None

BACKEND = "cython" if _c is not None else "python"


def _impl(use_compiled):
    if use_compiled is None:
        use_compiled = _c is not None
    if use_compiled and _c is None:
        raise RuntimeError("compiled kernels are not available")
    return _c if use_compiled else _py


def aps_scores_batch(probs, use_compiled=None) -> np.ndarray:
    """Deterministic APS score of every class for each row of ``probs``.

    Entry ``[i, k]`` is the cumulative sorted probability of row ``i`` up to
    and including class ``k``; ties rank by ascending class index.
    """
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be an (n, K) matrix")
    return _impl(use_compiled).aps_scores_batch(probs)


def wsc_min_windows(sorted_hits, min_count: int, use_compiled=None):
    """Minimum coverage over contiguous windows of at least ``min_count`` points.

    ``sorted_hits`` is a ``(D, n)`` 0/1 matrix, each row ordered by a projection.
    Returns integer arrays ``(hits, length)`` of the worst window per row.
    A window of length ``>= 2 * min_count`` splits into two admissible halves,
    one of which covers no better, so only lengths below that are scanned.
    """
    hits = np.ascontiguousarray(sorted_hits, dtype=np.uint8)
    if hits.ndim != 2:
        raise ValueError("sorted_hits must be a (D, n) matrix")
    n = hits.shape[1]
    if not 1 <= min_count <= n:
        raise ValueError(f"min_count must lie in [1, {n}], got {min_count}")
    return _impl(use_compiled).wsc_min_windows(hits, int(min_count))
