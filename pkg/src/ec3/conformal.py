"""Split-conformal calibration and prediction-set construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .probs import Dataset, as_simplex
from .scores import APS, ScoreConfig, class_keys, class_scores, label_keys

DEFAULT_RATIOS = (2, 1, 4, 3)


@dataclass(frozen=True)
class CalibrationResult:
    """Threshold ``eta_hat`` plus the low-order key of the sample that set it.

    ``eta_tie = inf`` admits every class whose score equals ``eta_hat``.
    """

    eta_hat: float
    alpha: float
    n_cal: int
    score_cfg: ScoreConfig = field(default=APS)
    eta_tie: float = math.inf


@dataclass(frozen=True)
class PredictionSet:
    members: frozenset

    @property
    def size(self) -> int:
        return len(self.members)

    def __contains__(self, k) -> bool:
        return k in self.members


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")


def quantile_rank(n: int, alpha: float) -> int:
    """1-based order statistic ``ceil((1 - alpha)(n + 1))`` used as threshold.

    The product is rounded to 9 decimals first so that e.g. ``0.9 * 100``
    gives 90 rather than 91.
    """
    _check_alpha(alpha)
    return math.ceil(round((1.0 - alpha) * (n + 1), 9))


def calibrate(scores, alpha: float, score_cfg: ScoreConfig = APS, ties=None) -> CalibrationResult:
    """Threshold at the ``ceil((1-alpha)(n+1))``-th smallest score, or +inf past n.

    With ``ties``, the low halves of :func:`ec3.scores.label_keys`, samples
    are ordered by ``(score, tie)``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise DomainError("cannot calibrate on an empty score set")
    if not np.all(np.isfinite(s)):
        raise DomainError("calibration scores must be finite")
    if ties is not None:
        t = np.asarray(ties, dtype=np.float64).ravel()
        if t.shape != s.shape or not np.all(np.isfinite(t)):
            raise DomainError("tie keys must be finite and match the scores")
    k = quantile_rank(s.size, alpha)
    if k > s.size:
        return CalibrationResult(math.inf, float(alpha), int(s.size), score_cfg)
    if ties is None:
        return CalibrationResult(float(np.partition(s, k - 1)[k - 1]), float(alpha), int(s.size), score_cfg)
    i = np.lexsort((t, s))[k - 1]
    return CalibrationResult(float(s[i]), float(alpha), int(s.size), score_cfg, float(t[i]))


def calibrate_on(probs, labels, alpha: float, cfg: ScoreConfig = APS, rng: Optional[np.random.Generator] = None):
    """Calibrate on exact-order keys of the labels; pair with :func:`predict_sets`."""
    scores, ties = label_keys(probs, labels, cfg, rng)
    return calibrate(scores, alpha, cfg, ties)


def predict_sets(probs, cal: CalibrationResult, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Boolean membership matrix ``(n, K)``: class keys at or below the threshold."""
    arr = np.atleast_2d(as_simplex(probs))
    if math.isinf(cal.eta_hat):
        return np.ones(arr.shape, dtype=bool)
    if math.isinf(cal.eta_tie):
        return class_scores(arr, cal.score_cfg, rng) <= cal.eta_hat
    scores, ties = class_keys(arr, cal.score_cfg, rng)
    return (scores < cal.eta_hat) | ((scores == cal.eta_hat) & (ties <= cal.eta_tie))


def mask_to_sets(mask: np.ndarray) -> List[PredictionSet]:
    return [PredictionSet(frozenset(np.flatnonzero(row).tolist())) for row in mask]


def sets_to_mask(sets: Sequence, K: int) -> np.ndarray:
    if isinstance(sets, np.ndarray):
        if sets.ndim != 2 or sets.shape[1] != K:
            raise DomainError("membership matrix has the wrong shape")
        return sets.astype(bool)
    mask = np.zeros((len(sets), K), dtype=bool)
    for i, s in enumerate(sets):
        members = s.members if isinstance(s, PredictionSet) else s
        for k in members:
            if not 0 <= k < K:
                raise DomainError(f"set {i} contains class {k} outside [0, {K})")
            mask[i, k] = True
    return mask


def predict_set(p, cal: CalibrationResult, rng: Optional[np.random.Generator] = None) -> PredictionSet:
    arr = as_simplex(p)
    if arr.ndim != 1:
        raise DomainError("predict_set takes a single vector; use predict_sets for batches")
    return mask_to_sets(predict_sets(arr, cal, rng))[0]


def split_sizes(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> List[int]:
    """Floor each block, then give the remainder to the last block."""
    if len(ratios) < 1 or any(r <= 0 for r in ratios):
        raise DomainError("split ratios must be positive")
    total = float(sum(ratios))
    sizes = [int(math.floor(n * r / total)) for r in ratios]
    sizes[-1] += n - sum(sizes)
    return sizes


def split_indices(n: int, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> List[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + split_sizes(n, ratios))
    return [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def split_dataset(d: Dataset, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> Tuple[Dataset, ...]:
    """Seeded disjoint split into (train, valid, cal, test) by ``ratios``."""
    if d.n < len(ratios):
        raise DomainError(f"need at least {len(ratios)} samples to split, got {d.n}")
    return tuple(d.subset(idx) for idx in split_indices(d.n, ratios, seed))


def run_cp_masks(
    cal_set: Dataset,
    test_set: Dataset,
    alpha: float,
    cfg: ScoreConfig = APS,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[CalibrationResult, np.ndarray]:
    if cal_set.K != test_set.K:
        raise DomainError("calibration and test sets disagree on K")
    cal = calibrate_on(cal_set.probs, cal_set.labels, alpha, cfg, rng)
    return cal, predict_sets(test_set.probs, cal, rng)


def run_cp(
    cal_set: Dataset,
    test_set: Dataset,
    alpha: float,
    cfg: ScoreConfig = APS,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[CalibrationResult, List[PredictionSet]]:
    """Score the calibration labels, calibrate, and build one set per test sample."""
    cal, mask = run_cp_masks(cal_set, test_set, alpha, cfg, rng)
    return cal, mask_to_sets(mask)
