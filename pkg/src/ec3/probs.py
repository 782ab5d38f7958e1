"""Probability-vector numerics: simplex checks, entropy, tempered softmax, sorting.

Every function accepts either a single vector of shape ``(K,)`` or a batch of
row vectors of shape ``(n, K)``. Logarithms are natural throughout, so
entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError

SIMPLEX_TOL = 1e-9
RENORM_TOL = 1e-6
PROB_CLAMP = 1e-12
# RENORM_TOL is inclusive; the slack absorbs decimal round-off such as 1 - 0.999999
RENORM_LIMIT = RENORM_TOL * (1.0 + 1e-6)


def as_simplex(p, renormalize: bool = True) -> np.ndarray:
    """Validate ``p`` as one or more points on the probability simplex.

    Rows whose sum deviates from 1 by more than ``SIMPLEX_TOL`` but less than
    ``RENORM_TOL`` are divided by their sum. Larger deviations, negative or
    non-finite entries, and fewer than two classes raise :class:`DomainError`.
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DomainError(f"expected a vector or matrix, got ndim={arr.ndim}")
    if arr.shape[-1] < 2:
        raise DomainError("need at least two classes")
    if not np.all(np.isfinite(arr)):
        raise DomainError("probabilities must be finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0 + RENORM_LIMIT):
        raise DomainError("probabilities must lie in [0, 1]")
    sums = arr.sum(axis=-1, keepdims=True)
    dev = np.abs(sums - 1.0)
    if np.any(dev > RENORM_LIMIT):
        worst = int(np.argmax(dev.ravel()))
        raise DomainError(f"row {worst} sums to {float(sums.ravel()[worst])!r}, not 1")
    if np.any(dev > SIMPLEX_TOL):
        if not renormalize:
            raise DomainError("probabilities do not sum to 1")
        arr = arr / sums
    return arr


def as_logits(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] < 2:
        raise DomainError("logits need shape (K,) or (n, K) with K >= 2")
    if not np.all(np.isfinite(arr)):
        raise DomainError("logits must be finite")
    return arr


def entropy(p):
    """Shannon entropy in nats, with ``0 * log 0 = 0``.

    Returns a float for a single vector and an array for a batch.
    """
    arr = as_simplex(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(arr > 0.0, arr * np.log(np.where(arr > 0.0, arr, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if arr.ndim == 1 else h


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax without validation (internal hot path)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_with_temperature(z, temperature: float) -> np.ndarray:
    """Softmax of ``z / temperature`` with max-subtraction for stability."""
    if not np.isfinite(temperature) or temperature <= 0.0:
        raise DomainError(f"temperature must be positive, got {temperature!r}")
    return softmax(as_logits(z) / temperature)


def log_probs(p, clamp: float = PROB_CLAMP) -> np.ndarray:
    """Lift probabilities to logits as ``log(max(p, clamp))``."""
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), clamp))


class SortedProbs(NamedTuple):
    """Descending sort of a probability vector.

    ``order[r]`` is the class at rank ``r`` and ``rank_of[k]`` the 0-based rank
    of class ``k``, so ``sorted == probs[order]``.
    """

    sorted: np.ndarray
    order: np.ndarray
    rank_of: np.ndarray


def descending_order(p: np.ndarray) -> np.ndarray:
    # Stable sort of -p keeps ascending class index among ties.
    return np.argsort(-p, axis=-1, kind="stable")


def sort_desc(p) -> SortedProbs:
    arr = as_simplex(p)
    order = descending_order(arr)
    rank_of = np.empty_like(order)
    np.put_along_axis(
        rank_of, order, np.broadcast_to(np.arange(arr.shape[-1]), order.shape), axis=-1
    )
    return SortedProbs(np.take_along_axis(arr, order, axis=-1), order, rank_of)


class LabeledSample(NamedTuple):
    probs: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Per-sample probability vectors with integer labels.

    ``oracle`` holds the true conditional distributions when they are known
    (synthetic data only).
    """

    probs: np.ndarray
    labels: np.ndarray
    oracle: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = np.array(as_simplex(self.probs))
        if probs.ndim != 2:
            raise DomainError("dataset probabilities must be an (n, K) matrix")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
            raise DomainError("need exactly one label per sample")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DomainError("labels must be integers")
        labels = labels.astype(np.int64)  # always a copy
        if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise DomainError(f"labels must lie in [0, {probs.shape[1]})")
        oracle = self.oracle
        if oracle is not None:
            oracle = np.array(as_simplex(oracle))
            if oracle.shape != probs.shape:
                raise DomainError("oracle must have the same shape as probs")
            oracle.setflags(write=False)
        probs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "oracle", oracle)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.probs[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        oracle = None if self.oracle is None else self.oracle[idx]
        return Dataset(self.probs[idx], self.labels[idx], oracle)

    def with_probs(self, probs) -> "Dataset":
        """Same labels and oracle, different probability vectors."""
        return Dataset(probs, self.labels, self.oracle)
