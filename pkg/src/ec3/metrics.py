"""Coverage, efficiency and conditional-coverage diagnostics for prediction sets.

``sets`` arguments take either a boolean membership matrix of shape ``(n, K)``
or a sequence of :class:`~ec3.conformal.PredictionSet` (or plain iterables of
class indices).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .conformal import PredictionSet
from .errors import DomainError
from .probs import entropy

WSC_DELTA = 0.25
WSC_DIRECTIONS = 1000


def _hits_and_sizes(sets, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if isinstance(sets, np.ndarray):
        if sets.ndim != 2:
            raise DomainError("membership matrix must be 2-D")
        if sets.shape[0] != labels.shape[0]:
            raise DomainError(f"{sets.shape[0]} sets but {labels.shape[0]} labels")
        return sets[np.arange(labels.shape[0]), labels].astype(bool), sets.sum(axis=1)
    if len(sets) != labels.shape[0]:
        raise DomainError(f"{len(sets)} sets but {labels.shape[0]} labels")
    hits = np.fromiter((int(y) in _members(s) for s, y in zip(sets, labels)), dtype=bool, count=len(sets))
    return hits, _sizes(sets)


def _members(s):
    return s.members if isinstance(s, PredictionSet) else set(s)


def _sizes(sets):
    if isinstance(sets, np.ndarray):
        return sets.sum(axis=1)
    return np.fromiter((len(_members(s)) for s in sets), dtype=np.int64, count=len(sets))


def coverage(sets, labels) -> float:
    hits, _ = _hits_and_sizes(sets, labels)
    if hits.size == 0:
        raise DomainError("coverage of an empty sample")
    return float(hits.mean())


def efficiency(sets) -> float:
    sizes = _sizes(sets)
    if sizes.size == 0:
        raise DomainError("efficiency of an empty list of sets")
    return float(sizes.mean())


def class_coverage(sets, labels, K: int) -> np.ndarray:
    """Per-class hit rate; classes with no samples are NaN."""
    hits, _ = _hits_and_sizes(sets, labels)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    covered = np.bincount(labels, weights=hits.astype(np.float64), minlength=K)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, covered / counts, np.nan)


def coverage_distance(class_cov, target: float = 0.9, norm: str = "L1") -> float:
    """L1 or L2 norm of the shortfalls ``target - cov_k`` over classes below target."""
    if not 0.0 < target < 1.0:
        raise DomainError("target must lie in (0, 1)")
    cov = np.asarray(class_cov, dtype=np.float64)
    cov = cov[~np.isnan(cov)]
    short = np.maximum(0.0, target - cov)
    norm = norm.upper()
    if norm == "L1":
        return float(short.sum())
    if norm == "L2":
        return float(np.sqrt((short**2).sum()))
    raise DomainError(f"unknown norm {norm!r}")


def wsc(
    features,
    sets,
    labels,
    delta: float = WSC_DELTA,
    n_directions: int = WSC_DIRECTIONS,
    seed: int = 0,
    use_compiled: Optional[bool] = None,
) -> float:
    """Worst-slab coverage.

    Draws ``n_directions`` seeded unit vectors, projects ``features`` on each,
    and takes the minimum coverage over all slabs holding at least a
    ``delta`` fraction of the points.
    """
    x = np.asarray(features, dtype=np.float64)
    hits, _ = _hits_and_sizes(sets, labels)
    n = hits.shape[0]
    if n < 2:
        raise DomainError("wsc needs at least two samples")
    if x.ndim != 2 or x.shape[0] != n:
        raise DomainError("features must be an (n, d) matrix aligned with the sets")
    if not 0.0 < delta <= 1.0:
        raise DomainError("delta must lie in (0, 1]")
    if n_directions < 1:
        raise DomainError("n_directions must be at least 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_directions, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj = dirs @ x.T
    order = np.argsort(proj, axis=1, kind="stable")
    sorted_hits = hits.astype(np.uint8)[order]
    min_count = max(1, math.ceil(round(delta * n, 9)))
    num, den = kernels.wsc_min_windows(sorted_hits, min_count, use_compiled)
    # exact fraction comparison, then a single division
    best = 0
    for d in range(1, n_directions):
        if num[d] * den[best] < num[best] * den[d]:
            best = d
    return float(num[best]) / float(den[best])


def default_sscv_bins(K: Optional[int] = None):
    top = K if K is not None else math.inf
    return [(0, 1), (2, 3), (4, 6), (7, 10), (11, top)]


def sscv(sets, labels, alpha: float, bins: Optional[Sequence[Tuple[float, float]]] = None) -> float:
    """Size-stratified coverage violation: worst ``|cov(stratum) - (1 - alpha)|``.

    ``bins`` are inclusive set-size ranges; empty strata are skipped.
    """
    hits, sizes = _hits_and_sizes(sets, labels)
    if bins is None:
        K = sets.shape[1] if isinstance(sets, np.ndarray) else None
        bins = default_sscv_bins(K)
    worst = 0.0
    for lo, hi in bins:
        sel = (sizes >= lo) & (sizes <= hi)
        if sel.any():
            worst = max(worst, abs(float(hits[sel].mean()) - (1.0 - alpha)))
    return worst


@dataclass
class EvalReport:
    coverage: float
    efficiency: float
    mean_entropy: float
    class_coverage: list
    wsc: float
    sscv: float
    empty_set_rate: float

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["class_coverage"] = [None if (c is None or math.isnan(c)) else c for c in self.class_coverage]
        d["wsc"] = None if math.isnan(self.wsc) else self.wsc
        return d


def evaluate(
    probs,
    sets: np.ndarray,
    labels,
    alpha: float,
    wsc_directions: int = WSC_DIRECTIONS,
    wsc_delta: float = WSC_DELTA,
    seed: int = 0,
    sscv_bins=None,
) -> EvalReport:
    """All metrics for one split. ``wsc_directions=0`` skips WSC (reported NaN)."""
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[1]
    _, sizes = _hits_and_sizes(sets, labels)
    w = math.nan
    if wsc_directions > 0:
        w = wsc(probs, sets, labels, wsc_delta, wsc_directions, seed)
    return EvalReport(
        coverage=coverage(sets, labels),
        efficiency=efficiency(sets),
        mean_entropy=float(np.mean(entropy(probs))),
        class_coverage=class_coverage(sets, labels, K).tolist(),
        wsc=w,
        sscv=sscv(sets, labels, alpha, sscv_bins),
        empty_set_rate=float(np.mean(sizes == 0)),
    )


SCALAR_METRICS = ("coverage", "efficiency", "mean_entropy", "wsc", "sscv", "empty_set_rate")


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation; the std of a single value is 0."""
    v = np.asarray(list(values), dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return math.nan, math.nan
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def aggregate(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    out = {}
    for name in SCALAR_METRICS:
        m, s = mean_std(getattr(r, name) for r in reports)
        out[name] = {"mean": m, "std": s}
    cc = np.array([r.class_coverage for r in reports], dtype=np.float64)
    with warnings.catch_warnings():
        # all-NaN columns (classes never seen) are expected
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_cc = np.nanmean(cc, axis=0)
    out["class_coverage"] = [None if math.isnan(c) else float(c) for c in mean_cc]
    return out
