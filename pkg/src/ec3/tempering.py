"""Temperature sweeps over (entropy, efficiency) and Pareto-front extraction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .conformal import calibrate_on, predict_sets
from .errors import DomainError
from .probs import as_logits, as_simplex, entropy, log_probs, softmax
from .scores import APS, ScoreConfig


@dataclass(frozen=True)
class SweepPoint:
    temperature: float
    mean_entropy: float
    efficiency: float
    coverage: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def default_grid(n: int = 40, lo: float = 0.05, hi: float = 20.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def _check_grid(grid):
    g = np.asarray(grid, dtype=np.float64).ravel()
    if g.size == 0:
        raise DomainError("temperature grid is empty")
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise DomainError("temperatures must be positive and finite")
    return g


def _evaluate(P, labels, cal_idx, test_idx, alpha, cfg, T, seed):
    rng = np.random.default_rng(seed)
    cal = calibrate_on(P[cal_idx], labels[cal_idx], alpha, cfg, rng)
    mask = predict_sets(P[test_idx], cal, rng)
    y = labels[test_idx]
    return SweepPoint(
        temperature=float(T),
        mean_entropy=float(np.mean(entropy(P[test_idx]))),
        efficiency=float(mask.sum(axis=1).mean()),
        coverage=float(mask[np.arange(y.size), y].mean()),
    )


def temp_sweep(
    logits,
    labels,
    cal_idx,
    test_idx,
    alpha: float = 0.1,
    grid: Optional[Sequence[float]] = None,
    cfg: ScoreConfig = APS,
    probs=None,
    seed: int = 0,
) -> List[SweepPoint]:
    """Temper, recalibrate and evaluate at every temperature, in grid order.

    Pass ``logits=None`` and ``probs=...`` when only probabilities exist; they
    are lifted to ``log p`` and used untouched at ``T == 1``. ``seed`` feeds
    randomized scores and is reset at every temperature.
    """
    grid = _check_grid(default_grid() if grid is None else grid)
    labels = np.asarray(labels, dtype=np.int64)
    cal_idx = np.asarray(cal_idx, dtype=np.int64)
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if probs is not None:
        base = as_simplex(probs)
        z = log_probs(base)
    elif logits is not None:
        base = None
        z = as_logits(logits)
    else:
        raise DomainError("need logits or probabilities")
    points = []
    for T in grid:
        P = base if (base is not None and T == 1.0) else softmax(z / T)
        points.append(_evaluate(P, labels, cal_idx, test_idx, alpha, cfg, T, seed))
    return points


def _dominates(a: SweepPoint, b: SweepPoint) -> bool:
    return (
        a.mean_entropy <= b.mean_entropy
        and a.efficiency <= b.efficiency
        and (a.mean_entropy < b.mean_entropy or a.efficiency < b.efficiency)
    )


def pareto_filter(points: Sequence[SweepPoint]) -> List[SweepPoint]:
    """Non-dominated points for joint minimisation, sorted by entropy.

    Exact duplicates in (entropy, efficiency) keep their first occurrence.
    """
    if not points:
        raise DomainError("no points to filter")
    seen = set()
    unique = []
    for p in points:
        key = (p.mean_entropy, p.efficiency)
        if key not in seen:
            seen.add(key)
            unique.append(p)
    front = [p for p in unique if not any(_dominates(q, p) for q in unique if q is not p)]
    return sorted(front, key=lambda p: (p.mean_entropy, p.efficiency))


def select_by_entropy(points: Sequence[SweepPoint], threshold: float) -> Optional[SweepPoint]:
    """Most efficient point whose mean entropy is at most ``threshold``."""
    if not threshold > 0:
        raise DomainError("entropy threshold must be positive")
    ok = [p for p in points if p.mean_entropy <= threshold]
    if not ok:
        return None
    return min(ok, key=lambda p: (p.efficiency, p.mean_entropy))


def binned_dominance(trained: Sequence[SweepPoint], baseline: Sequence[SweepPoint], bin_width: float = 0.1) -> Dict:
    """Compare two sweeps on their shared entropy range.

    Points fall into bins of ``bin_width`` nats. A baseline point is a
    violation when it has strictly lower entropy and strictly lower
    efficiency than every trained point in its bin.
    """
    if not bin_width > 0:
        raise DomainError("bin_width must be positive")

    def bins(points):
        out: Dict[int, List[SweepPoint]] = {}
        for p in points:
            out.setdefault(int(math.floor(p.mean_entropy / bin_width)), []).append(p)
        return out

    tb, bb = bins(trained), bins(baseline)
    shared = sorted(set(tb) & set(bb))
    violations = []
    for b in shared:
        for p in bb[b]:
            if all(p.mean_entropy < q.mean_entropy and p.efficiency < q.efficiency for q in tb[b]):
                violations.append(p.to_dict())
    return {
        "shared_bins": [round(b * bin_width, 10) for b in shared],
        "violations": violations,
        "dominates": not violations,
    }
