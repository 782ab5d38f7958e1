"""APS and RAPS non-conformity scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import kernels
from .errors import DomainError
from .probs import as_simplex, descending_order


@dataclass(frozen=True)
class ScoreConfig:
    """Which score to use.

    For ``kind="aps"`` the RAPS fields are ignored. ``randomized`` switches on
    uniform smoothing of the last included class and needs an ``rng`` at call
    time; it is off by default.
    """

    kind: str = "aps"
    raps_lambda: float = 0.1
    raps_kreg: int = 1
    randomized: bool = False

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("aps", "raps"):
            raise DomainError(f"unknown score kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.raps_lambda < 0:
            raise DomainError("raps_lambda must be non-negative")
        if self.raps_kreg < 1:
            raise DomainError("raps_kreg must be at least 1")

    def check_classes(self, K: int) -> None:
        if self.kind == "raps" and self.raps_kreg > K:
            raise DomainError(f"raps_kreg={self.raps_kreg} exceeds K={K}")


APS = ScoreConfig()


def _check_label(y, K):
    y_arr = np.asarray(y)
    if not np.issubdtype(y_arr.dtype, np.integer) or np.any(y_arr < 0) or np.any(y_arr >= K):
        raise DomainError(f"class index must be an integer in [0, {K})")
    return y_arr.astype(np.int64)


def aps_scores_all(p) -> np.ndarray:
    """APS score of every class: cumulative sorted mass through its rank."""
    arr = as_simplex(p)
    out = kernels.aps_scores_batch(np.atleast_2d(arr))
    return out[0] if arr.ndim == 1 else out


def aps_score(p, y) -> float:
    arr = as_simplex(p)
    if arr.ndim != 1:
        raise DomainError("aps_score takes a single vector; use class_scores for batches")
    y = _check_label(y, arr.shape[0])
    return float(aps_scores_all(arr)[y])


def ranks(p: np.ndarray) -> np.ndarray:
    """0-based rank of every class (0 = most probable)."""
    order = descending_order(p)
    out = np.empty_like(order)
    np.put_along_axis(out, order, np.broadcast_to(np.arange(p.shape[-1]), order.shape), axis=-1)
    return out


def _tails(arr: np.ndarray) -> np.ndarray:
    """Mass ranked strictly after each class, summed smallest first."""
    order = descending_order(arr)
    srt = np.take_along_axis(arr, order, axis=-1)
    rev = np.cumsum(srt[:, :0:-1], axis=1)[:, ::-1]
    tail = np.concatenate([rev, np.zeros((arr.shape[0], 1))], axis=1)
    out = np.empty_like(tail)
    np.put_along_axis(out, order, tail, axis=-1)
    return out


def _two_sum(a, b):
    """``s + e == a + b`` exactly, with ``s = fl(a + b)``."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _add(hi, lo, x):
    s, e = _two_sum(hi, x)
    return _two_sum(s, lo + e)


def _keys(arr, cfg, rng, exact):
    cfg.check_classes(arr.shape[1])
    if exact:
        # double-double 1 - tail: hi is the rounded score, lo the exact remainder
        hi, lo = _two_sum(1.0, -_tails(arr))
    else:
        hi, lo = kernels.aps_scores_batch(arr), None
    if cfg.randomized:
        if rng is None:
            raise DomainError("randomized scores need an rng")
        u = rng.random(size=(arr.shape[0], 1))
        # the class's own mass is included with probability U
        if exact:
            hi, lo = _add(hi, lo, -u * arr)
        else:
            hi = hi - u * arr
    if cfg.kind == "raps" and cfg.raps_lambda > 0:
        pen = cfg.raps_lambda * np.maximum(0, ranks(arr) + 1 - cfg.raps_kreg)
        if exact:
            hi, lo = _add(hi, lo, pen)
        else:
            hi = hi + pen
    return hi, lo


def class_scores(p, cfg: ScoreConfig = APS, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Score matrix under ``cfg``: entry ``[i, k]`` scores class ``k`` for row ``i``."""
    return _keys(np.atleast_2d(as_simplex(p)), cfg, rng, False)[0]


def class_keys(p, cfg: ScoreConfig = APS, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Scores as ``(hi, lo)`` pairs whose lexicographic order is exact.

    Sharp rows push cumulative sums past the last float below 1, so plain
    scores tie at 1.0 and lose their order. Here each score is ``1 - tail``
    with the tail (mass ranked after the class) summed smallest first and
    the subtraction kept error-free, so ``hi + lo`` is the score of the
    normalised row to about 32 digits. ``hi`` agrees with
    :func:`class_scores` to a few ulps. Consumes ``rng`` exactly like
    :func:`class_scores`.
    """
    return _keys(np.atleast_2d(as_simplex(p)), cfg, rng, True)


def _labelled(p, labels):
    arr = np.atleast_2d(as_simplex(p))
    labels = _check_label(np.atleast_1d(labels), arr.shape[1])
    if labels.shape[0] != arr.shape[0]:
        raise DomainError("need one label per row")
    return arr, labels[:, None]


def label_scores(p, labels, cfg: ScoreConfig = APS, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Score of the given label for each row."""
    arr, idx = _labelled(p, labels)
    return np.take_along_axis(class_scores(arr, cfg, rng), idx, axis=1)[:, 0]


def label_keys(p, labels, cfg: ScoreConfig = APS, rng: Optional[np.random.Generator] = None):
    """``(hi, lo)`` keys of the given labels; see :func:`class_keys`."""
    arr, idx = _labelled(p, labels)
    scores, ties = class_keys(arr, cfg, rng)
    return np.take_along_axis(scores, idx, axis=1)[:, 0], np.take_along_axis(ties, idx, axis=1)[:, 0]


def raps_score(p, y, cfg: ScoreConfig) -> float:
    if cfg.kind != "raps":
        raise DomainError("raps_score needs a RAPS config")
    arr = as_simplex(p)
    if arr.ndim != 1:
        raise DomainError("raps_score takes a single vector")
    y = _check_label(y, arr.shape[0])
    cfg.check_classes(arr.shape[0])
    rank1 = int(ranks(arr)[y]) + 1
    return aps_score(arr, y) + cfg.raps_lambda * max(0, rank1 - cfg.raps_kreg)


def avg_score(p):
    """Mean APS score over all K classes.

    Equal to ``sum_k (K - k + 1) / K * p_(k)`` over the descending sort, and
    always within ``[(K + 1) / (2K), 1]``.
    """
    arr = as_simplex(p)
    return aps_scores_all(arr).mean(axis=-1) if arr.ndim == 2 else float(aps_scores_all(arr).mean())
