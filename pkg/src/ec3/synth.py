"""Synthetic classification benchmarks with known conditional distributions.

Each sample draws an oracle distribution from a Dirichlet, a label from that
distribution, and a "base model" output by distorting the oracle. Samples are
i.i.d., so any split is exchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError
from .probs import Dataset, log_probs, softmax

DISTORTIONS = ("none", "sharpen", "blur", "logit_noise")


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``distortion_param`` is the temperature for ``sharpen`` (< 1) and ``blur``
    (> 1) and the noise scale for ``logit_noise``. With ``priors`` the
    Dirichlet parameter becomes ``concentration * K * priors``, whose mean is
    exactly ``priors``. ``rare_temperature`` is the extra temperature that
    :func:`imbalanced_variant` applies to the base outputs of samples whose
    class is rarer than ``1/K``.
    """

    K: int = 10
    n: int = 10_000
    concentration: float = 0.1
    distortion: str = "sharpen"
    distortion_param: float = 0.25
    priors: Optional[Sequence[float]] = None
    rare_temperature: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise DomainError("K must be at least 2")
        if self.n < 1:
            raise DomainError("n must be at least 1")
        if not self.concentration > 0:
            raise DomainError("concentration must be positive")
        if self.distortion not in DISTORTIONS:
            raise DomainError(f"distortion must be one of {DISTORTIONS}")
        if self.distortion == "sharpen" and not 0 < self.distortion_param < 1:
            raise DomainError("sharpen needs a temperature in (0, 1)")
        if self.distortion == "blur" and not self.distortion_param > 1:
            raise DomainError("blur needs a temperature above 1")
        if self.distortion == "logit_noise" and self.distortion_param < 0:
            raise DomainError("logit noise scale must be non-negative")
        if not self.rare_temperature > 0:
            raise DomainError("rare_temperature must be positive")
        if self.priors is not None:
            pri = np.asarray(self.priors, dtype=np.float64)
            if pri.shape != (self.K,) or np.any(pri <= 0) or abs(pri.sum() - 1.0) > 1e-9:
                raise DomainError("priors must be K positive numbers summing to 1")
            object.__setattr__(self, "priors", tuple(float(x) for x in pri))


def _dirichlet(rng, conc, n):
    g = rng.gamma(np.broadcast_to(conc, (n, conc.shape[0])))
    s = g.sum(axis=1, keepdims=True)
    bad = s[:, 0] <= 0
    if bad.any():
        # every gamma draw underflowed: fall back to a one-hot at a random class
        g[bad] = 0.0
        g[bad, rng.choice(conc.shape[0], size=int(bad.sum()), p=conc / conc.sum())] = 1.0
        s = g.sum(axis=1, keepdims=True)
    return g / s


def _sample_labels(rng, pi):
    u = rng.random(pi.shape[0])
    cdf = np.cumsum(pi, axis=1)
    y = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(y, pi.shape[1] - 1)


def distort(pi: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.distortion == "none":
        return pi.copy()
    logits = log_probs(pi)
    if cfg.distortion in ("sharpen", "blur"):
        return softmax(logits / cfg.distortion_param)
    return softmax(logits + cfg.distortion_param * rng.standard_normal(pi.shape))


def generate(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    if cfg.priors is None:
        conc = np.full(cfg.K, cfg.concentration)
    else:
        conc = cfg.concentration * cfg.K * np.asarray(cfg.priors)
    pi = _dirichlet(rng, conc, cfg.n)
    labels = _sample_labels(rng, pi)
    base = distort(pi, cfg, rng)
    return Dataset(base, labels, pi)


def rare_classes(cfg: SynthConfig) -> np.ndarray:
    if cfg.priors is None:
        return np.zeros(0, dtype=np.int64)
    pri = np.asarray(cfg.priors)
    return np.flatnonzero(pri < 1.0 / cfg.K - 1e-12)


def imbalanced_variant(cfg: SynthConfig) -> Dataset:
    """Class-imbalanced data whose rare-class samples get distorted base outputs.

    Those outputs are re-tempered by ``rare_temperature``. Below 1 the base
    model is overconfident on rare-class samples, which is what pushes their
    class coverage under the target: at a fixed threshold, flattening a row
    can only lower the APS score of its label.
    """
    if cfg.priors is None:
        raise DomainError("imbalanced_variant needs class priors")
    d = generate(cfg)
    rare = np.isin(d.labels, rare_classes(cfg))
    if not rare.any():
        return d
    base = np.array(d.probs)
    base[rare] = softmax(log_probs(base[rare]) / cfg.rare_temperature)
    return Dataset(base, d.labels, d.oracle)


def default_imbalanced(seed: int = 0, n: int = 10_000) -> SynthConfig:
    """Ten classes, one with prior 0.55 and nine with 0.05."""
    return SynthConfig(K=10, n=n, priors=(0.55,) + (0.05,) * 9, seed=seed)


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)
