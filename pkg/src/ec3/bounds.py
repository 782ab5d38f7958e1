"""Numerical checks of the efficiency-entropy bounds for APS.

Three inequalities are checked on concrete data:

* per-sample: the mean APS score over all classes is at most
  ``min(C_K + 1 - H, 1 + H)``;
* calibration quantile: the threshold is at most the tail mean of the average
  score plus an oracle-entropy term plus ``tau``, with a Hoeffding failure
  probability;
* expected set size: ``E|C(X)| / K`` is at most the explicit four-term
  constant chain in ``mu``, the tail entropy, ``C_K`` and ``C``.

Conditional expectations over the tail subset ``{V(X, Y) >= eta_hat}`` are
plug-in sample means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .conformal import CalibrationResult, calibrate, calibrate_on, predict_sets
from .errors import DomainError
from .probs import Dataset, as_simplex, entropy
from .scores import APS, ScoreConfig, avg_score, label_scores

HOLD_TOL = 1e-9
DEFAULT_TAU = 0.05


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    holds: bool
    slack: float
    components: Dict[str, float] = field(default_factory=dict)
    skipped: bool = False
    note: str = ""

    def to_dict(self) -> Dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            return v

        return {
            "name": self.name,
            "lhs": clean(self.lhs),
            "rhs": clean(self.rhs),
            "holds": bool(self.holds),
            "slack": clean(self.slack),
            "skipped": self.skipped,
            "note": self.note,
            "components": {k: clean(v) for k, v in self.components.items()},
        }


def _report(name, lhs, rhs, components, skipped=False, note=""):
    lhs, rhs = float(lhs), float(rhs)
    return BoundReport(name, lhs, rhs, lhs <= rhs + HOLD_TOL, rhs - lhs, components, skipped, note)


def c_k(K: int) -> float:
    """``log(sum_{k=1}^{K} exp(-(k-1)/K))``."""
    if int(K) != K or K < 1:
        raise DomainError(f"K must be a positive integer, got {K!r}")
    K = int(K)
    return math.log(math.fsum(math.exp(-(k - 1) / K) for k in range(1, K + 1)))


def prop1_bounds(h, K: int):
    """The two per-sample upper bounds ``(C_K + 1 - H, 1 + H)``."""
    ck = c_k(K)
    h = np.asarray(h, dtype=np.float64)
    return ck + 1.0 - h, 1.0 + h


def prop1_slacks(P) -> np.ndarray:
    """Vectorised slack ``min(bounds) - avg_score`` for each row of ``P``."""
    P = np.atleast_2d(as_simplex(P))
    b1, b2 = prop1_bounds(entropy(P), P.shape[1])
    return np.minimum(b1, b2) - avg_score(P)


def prop1_check(p) -> BoundReport:
    arr = as_simplex(p)
    if arr.ndim != 1:
        raise DomainError("prop1_check takes a single vector; use prop1_slacks for batches")
    K = arr.shape[0]
    h = entropy(arr)
    ck = c_k(K)
    b_ck, b_ent = (float(b) for b in prop1_bounds(h, K))
    return _report(
        "prop1",
        avg_score(arr),
        min(b_ck, b_ent),
        {"C_K": ck, "entropy": h, "bound_ck": b_ck, "bound_entropy": b_ent, "crossing_entropy": ck / 2},
        note="active=ck" if b_ck < b_ent else "active=entropy",
    )


def branch_crossing(K: int, iters: int = 200) -> float:
    """Entropy where the two per-sample bounds meet, found by bisection."""
    lo, hi = 0.0, math.log(K) + c_k(K)
    ck = c_k(K)

    def gap(h):
        return (ck + 1.0 - h) - (1.0 + h)

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_simplex(rng: np.random.Generator, n: int, K: int) -> np.ndarray:
    """Dirichlet draws with log-uniform concentration in [0.01, 10] per row.

    Low concentrations give near one-hot vectors, high ones near uniform, so
    both bound branches are exercised.
    """
    conc = np.exp(rng.uniform(math.log(0.01), math.log(10.0), size=(n, 1)))
    g = rng.gamma(np.broadcast_to(conc, (n, K)))
    s = g.sum(axis=1, keepdims=True)
    # all-zero gamma draws happen at tiny concentrations
    bad = s[:, 0] <= 0
    if bad.any():
        g[bad] = 0.0
        g[bad, rng.integers(0, K, size=int(bad.sum()))] = 1.0
        s = g.sum(axis=1, keepdims=True)
    return g / s


def prop1_fuzz(Ks: Sequence[int] = (2, 5, 10, 50, 100), n: int = 100_000, seed: int = 0, chunk: int = 20_000) -> Dict:
    """Count violations of the per-sample bound on random simplex points."""
    rng = np.random.default_rng(seed)
    per_k = {}
    for K in Ks:
        violations, min_slack, done = 0, math.inf, 0
        above = 0
        while done < n:
            m = min(chunk, n - done)
            P = random_simplex(rng, m, K)
            s = prop1_slacks(P)
            violations += int(np.sum(s < -HOLD_TOL))
            min_slack = min(min_slack, float(s.min()))
            above += int(np.sum(entropy(P) > c_k(K) / 2))
            done += m
        crossing = branch_crossing(K)
        per_k[str(K)] = {
            "samples": n,
            "violations": violations,
            "min_slack": min_slack,
            "C_K": c_k(K),
            "crossing_entropy": crossing,
            "crossing_error": abs(crossing - c_k(K) / 2),
            "fraction_ck_branch": above / n,
        }
    return {"per_K": per_k, "violations": sum(v["violations"] for v in per_k.values())}


@dataclass(frozen=True)
class TailSubset:
    indices: np.ndarray
    eta_hat: float
    alpha: float


def tail_subset(scores, eta_hat: float, alpha: float) -> TailSubset:
    s = np.asarray(scores, dtype=np.float64)
    return TailSubset(np.flatnonzero(s >= eta_hat), float(eta_hat), float(alpha))


def failure_prob(alpha: float, tau: float, n: int, eta_hat: float) -> float:
    if not eta_hat < 1.0:
        return 1.0
    return math.exp(-2.0 * alpha * tau**2 * n / (1.0 - eta_hat) ** 2)


def _oracle_term(oracle_rows, K):
    # the bound is stated with H + log K
    return float(np.mean(np.sqrt(2.0 * (entropy(oracle_rows) + math.log(K)))))


def _require_oracle(d: Dataset):
    if d.oracle is None:
        raise DomainError("this check needs oracle conditional distributions")


def _require_aps(cfg):
    if cfg.kind != "aps" or cfg.randomized:
        raise DomainError("the bounds are stated for the deterministic APS score only")


def prop2_check(cal: Dataset, alpha: float, tau: float = DEFAULT_TAU, cfg: ScoreConfig = APS) -> BoundReport:
    """Threshold versus its tail-subset upper bound on one calibration draw."""
    _require_oracle(cal)
    _require_aps(cfg)
    if tau <= 0:
        raise DomainError("tau must be positive")
    scores = label_scores(cal.probs, cal.labels, cfg)
    eta = calibrate(scores, alpha, cfg).eta_hat
    tail = tail_subset(scores, eta, alpha)
    fp = failure_prob(alpha, tau, cal.n, eta)
    comps = {"failure_prob": fp, "tau": tau, "tail_size": float(tail.indices.size), "n": float(cal.n)}
    if tail.indices.size == 0 or not eta < 1.0:
        return BoundReport("prop2", eta, math.inf, eta <= 1.0, math.inf, comps, skipped=True,
                           note="threshold at 1 or empty tail: check skipped")
    mean_vbar = float(np.mean(avg_score(cal.probs[tail.indices])))
    c_pi_k = _oracle_term(cal.oracle[tail.indices], cal.K)
    comps.update({"tail_mean_avg_score": mean_vbar, "C_pi_K": c_pi_k})
    return _report("prop2", eta, mean_vbar + c_pi_k + tau, comps,
                   note="failure_prob evaluated at the realised threshold")


def thm2_rhs(alpha: float, mu: float, tail_entropy: float, ck: float, K: int, C: float) -> float:
    """Explicit constant chain bounding ``E|C(X)| / K``."""
    a = 1.0 - alpha
    return a * (1 - 2 * mu) * tail_entropy + a * (mu * ck - (K + 1) / (2 * K)) + a * (1 - 2 * mu) + C


def thm2_check(test: Dataset, cal: CalibrationResult, alpha: Optional[float] = None, tau: float = DEFAULT_TAU) -> BoundReport:
    """Mean normalised set size versus the explicit bound, tail taken over ``test``."""
    _require_oracle(test)
    _require_aps(cal.score_cfg)
    alpha = cal.alpha if alpha is None else alpha
    K = test.K
    mask = predict_sets(test.probs, cal)
    lhs = float(mask.sum(axis=1).mean()) / K
    scores = label_scores(test.probs, test.labels, cal.score_cfg)
    tail = tail_subset(scores, cal.eta_hat, alpha)
    if tail.indices.size == 0:
        raise DomainError("tail subset is empty")
    ck = c_k(K)
    h_tail = entropy(test.probs[tail.indices])
    mu = float(np.mean(h_tail >= ck / 2))
    mean_h = float(np.mean(h_tail))
    C = _oracle_term(test.oracle[tail.indices], K) + tau + 1.0
    rhs = thm2_rhs(alpha, mu, mean_h, ck, K, C)
    comps = {
        "C_K": ck,
        "mu": mu,
        "tail_mean_entropy": mean_h,
        "C": C,
        "tau": tau,
        "tail_size": float(tail.indices.size),
        "failure_prob": failure_prob(alpha, tau, cal.n_cal, cal.eta_hat),
        "leading_term": K * (1 - alpha) * (1 - 2 * mu) * mean_h,
    }
    return _report("thm2", lhs, rhs, comps)


def monte_carlo(
    draw: Callable[[int], Tuple[Dataset, Dataset]],
    alpha: float,
    tau: float = DEFAULT_TAU,
    trials: int = 200,
    keep_reports: bool = False,
) -> Dict:
    """Repeat the quantile and set-size checks over independent draws.

    ``draw(trial)`` returns a fresh ``(cal, test)`` pair with oracles. The
    required holds rate is ``1 - mean(failure_prob) - 3 sigma`` with sigma the
    binomial standard error at that rate. ``keep_reports`` adds the
    per-trial :class:`BoundReport` objects under ``"reports"``.
    """
    p2: List[BoundReport] = []
    t2: List[BoundReport] = []
    for t in range(trials):
        cal_set, test_set = draw(t)
        p2.append(prop2_check(cal_set, alpha, tau))
        t2.append(thm2_check(test_set, calibrate_on(cal_set.probs, cal_set.labels, alpha), alpha, tau))
    out = {"trials": trials}
    for name, reps in (("prop2", p2), ("thm2", t2)):
        fp = float(np.mean([r.components["failure_prob"] for r in reps]))
        p = max(0.0, 1.0 - fp)
        margin = 3.0 * math.sqrt(p * (1.0 - p) / trials)
        rate = float(np.mean([r.holds for r in reps]))
        out[name] = {
            "holds_rate": rate,
            "mean_failure_prob": fp,
            "required_rate": p - margin,
            "passed": rate >= p - margin,
            "min_slack": float(min(r.slack for r in reps)),
            "skipped": int(sum(r.skipped for r in reps)),
        }
    if keep_reports:
        out["reports"] = {"prop2": p2, "thm2": t2}
    return out
