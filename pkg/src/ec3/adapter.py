"""Conformal adapter: an MLP on base probabilities trained for small APS sets.

The objective on a batch is

    focal + beta * ineff  [- cond]

``focal`` is the focal loss ``-(1 - p_y)^gamma log p_y``. ``ineff`` simulates
split conformal prediction inside the batch: the first half acts as a
pseudo-calibration set whose true-label APS scores give a smooth quantile
threshold, and each second-half sample contributes the hinge
``max(0, size - kappa)`` of its sigmoid-relaxed set size. ``cond`` is the
class-averaged sigmoid-relaxed coverage of the pseudo-calibration half.

Gradients are derived by hand. The APS sort permutation is held fixed in the
backward pass, so gradients flow through the cumulative sums only.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .conformal import calibrate_on, predict_sets
from .errors import DomainError, TrainingError
from .probs import PROB_CLAMP, Dataset, descending_order, entropy, log_probs, softmax

logger = logging.getLogger(__name__)

MAGIC = b"ECC3"
FORMAT_VERSION = 1
FLAG_LOG_INPUT = 1


@dataclass
class AdapterParams:
    """Weights ``W[i]`` of shape ``(dims[i], dims[i+1])`` and biases ``b[i]``.

    ReLU sits between layers; the last layer emits logits.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    log_input: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DomainError(f"layer {i} has inconsistent shapes")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise DomainError(f"layer {i} input does not match layer {i - 1} output")
        if self.weights[0].shape[0] != self.weights[-1].shape[1]:
            raise DomainError("adapter input and output dims must both equal K")

    @property
    def layer_dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def K(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "AdapterParams":
        return AdapterParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.log_input)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(
    K: int,
    hidden: Sequence[int] = (128,),
    seed: int = 0,
    log_input: bool = True,
    scheme: str = "identity",
    noise: float = 1e-2,
) -> AdapterParams:
    """Initial adapter weights.

    ``scheme="he"`` draws He-normal weights. ``scheme="identity"`` routes the
    input through the first ``2K`` hidden units as ``relu(x)`` and
    ``relu(-x)`` and recombines them, so with log inputs the initial adapter
    returns its input distribution; the remaining units and all weights get
    He-normal noise scaled by ``noise``. Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    dims = [K, *hidden, K]
    weights = [rng.standard_normal((a, b)) * math.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    if scheme == "identity":
        if any(h < 2 * K for h in hidden):
            raise DomainError(f"identity init needs every hidden width >= 2K = {2 * K}")
        weights = [noise * W for W in weights]
        eye = np.eye(K)
        if not hidden:
            weights[0] += eye
        else:
            weights[0][:, :K] += eye
            weights[0][:, K : 2 * K] -= eye
            for W in weights[1:-1]:
                W[: 2 * K, : 2 * K] += np.eye(2 * K)
            weights[-1][:K] += eye
            weights[-1][K : 2 * K] -= eye
    elif scheme != "he":
        raise DomainError(f"unknown init scheme {scheme!r}")
    return AdapterParams(weights, biases, log_input)


def identity_params(K: int, log_input: bool = True) -> AdapterParams:
    """Single linear layer that reproduces its input distribution (log inputs)."""
    return AdapterParams([np.eye(K)], [np.zeros(K)], log_input)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 4.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    sig_temp: float = 0.03
    kappa: float = 1.0
    conditional: bool = False
    hidden: Tuple[int, ...] = (128,)
    log_input: bool = True
    init: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if self.beta < 0 or self.gamma < 0:
            raise DomainError("beta and gamma must be non-negative")
        if not self.sig_temp > 0:
            raise DomainError("sig_temp must be positive")
        if self.kappa < 0:
            raise DomainError("kappa must be non-negative")
        if self.batch_size < 4:
            raise DomainError("batch_size must be at least 4")
        if self.epochs < 0:
            raise DomainError("epochs must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class LossBreakdown:
    """Loss components; ``total = focal + beta * ineff - cond``.

    ``cond`` is the class-averaged smoothed coverage (the negation of the mean
    per-class coverage loss), zero when the conditional term is off.
    """

    total: float
    focal: float
    ineff: float
    cond: float = 0.0
    entropy_mean: float = 0.0


# ---------------------------------------------------------------- forward


def _inputs(params: AdapterParams, base_probs: np.ndarray) -> np.ndarray:
    return log_probs(base_probs) if params.log_input else base_probs


def _forward_cache(params: AdapterParams, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def forward(params: AdapterParams, base_probs) -> Tuple[np.ndarray, np.ndarray]:
    """Corrected ``(logits, probabilities)`` for one vector or a batch."""
    x = np.asarray(base_probs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.K:
        raise DomainError(f"adapter expects K={params.K}, got {x.shape[1]}")
    acts, _ = _forward_cache(params, _inputs(params, x))
    logits = acts[-1]
    probs = softmax(logits)
    return (logits[0], probs[0]) if single else (logits, probs)


def correct(params: AdapterParams, d: Dataset) -> Dataset:
    """Dataset with corrected probabilities; ``d`` itself is untouched."""
    return d.with_probs(forward(params, d.probs)[1])


# ---------------------------------------------------------------- losses


def loss_ce(pi_hat, y) -> float:
    p = np.asarray(pi_hat, dtype=np.float64)
    return float(-np.log(max(p[int(y)], PROB_CLAMP)))


def _focal_terms(py: np.ndarray, gamma: float) -> np.ndarray:
    pc = np.maximum(py, PROB_CLAMP)
    if gamma == 0:
        return -np.log(pc)
    return -np.power(1.0 - py, gamma) * np.log(pc)


def _focal_grad(py: np.ndarray, gamma: float) -> np.ndarray:
    """d/dp of the focal term at the true-class probability."""
    pc = np.maximum(py, PROB_CLAMP)
    g = -1.0 / pc
    if gamma > 0:
        q = np.maximum(1.0 - py, 1e-300)
        g = gamma * np.power(q, gamma - 1.0) * np.log(pc) - np.power(1.0 - py, gamma) / pc
    return np.where(py >= PROB_CLAMP, g, 0.0)


def loss_focal(pi_hat, y, gamma: float) -> float:
    if gamma < 0:
        raise DomainError("gamma must be non-negative")
    p = np.asarray(pi_hat, dtype=np.float64)
    return float(_focal_terms(np.array([p[int(y)]]), gamma)[0])


def smooth_quantile_weights(scores, level: float) -> Tuple[float, np.ndarray]:
    """Linearly interpolated empirical quantile and its gradient.

    The quantile sits at 1-based position ``level * m`` among the sorted
    scores, clamped to ``[1, m]``; interpolation is between the two
    neighbouring order statistics. Returns ``(value, weights)`` where
    ``weights[j]`` is the derivative with respect to ``scores[j]``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    m = s.size
    if m == 0:
        raise DomainError("smooth quantile of no scores")
    if not 0 < level:
        raise DomainError("level must be positive")
    h = min(max(round(level * m, 9), 1.0), float(m))
    lo = int(math.floor(h))
    frac = h - lo
    order = np.argsort(s, kind="stable")
    w = np.zeros(m)
    w[order[lo - 1]] = 1.0 - frac
    if frac > 0:
        w[order[lo]] = frac
    return float(w @ s), w


def smooth_quantile(scores, level: float) -> float:
    return smooth_quantile_weights(scores, level)[0]


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _aps_fixed_order(P: np.ndarray):
    order = descending_order(P)
    cums = np.cumsum(np.take_along_axis(P, order, axis=1), axis=1)
    V = np.empty_like(P)
    np.put_along_axis(V, order, cums, axis=1)
    return V, order


def _aps_vjp(gV: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Pull a gradient on APS scores back to the probabilities (order fixed)."""
    g_sorted = np.take_along_axis(gV, order, axis=1)
    # dV_(r)/dp_(s) = 1 for s <= r, so reverse cumulative sums
    back = np.cumsum(g_sorted[:, ::-1], axis=1)[:, ::-1]
    out = np.empty_like(gV)
    np.put_along_axis(out, order, back, axis=1)
    return out


def _split_halves(B: int):
    if B < 4:
        raise DomainError("the inefficiency loss needs a batch of at least 4")
    m = B // 2
    return np.arange(m), np.arange(m, B)


def _ineff_parts(P: np.ndarray, labels: np.ndarray, cfg: TrainConfig, need_grad: bool):
    B, K = P.shape
    cal_idx, test_idx = _split_halves(B)
    V, order = _aps_fixed_order(P)
    m = cal_idx.size
    s_cal = V[cal_idx, labels[cal_idx]]
    level = (1.0 - cfg.alpha) * (1.0 + 1.0 / m)
    tau, w = smooth_quantile_weights(s_cal, level)
    u = (tau - V[test_idx]) / cfg.sig_temp
    sig = _sigmoid(u)
    sizes = sig.sum(axis=1)
    ineff = float(np.mean(np.maximum(0.0, sizes - cfg.kappa)))
    state = dict(V=V, order=order, cal_idx=cal_idx, test_idx=test_idx, tau=tau, w=w, sig=sig, sizes=sizes)
    return ineff, state


def loss_ineff(batch_pi_hat, batch_labels, cfg: TrainConfig) -> float:
    P = np.atleast_2d(np.asarray(batch_pi_hat, dtype=np.float64))
    return _ineff_parts(P, np.asarray(batch_labels, dtype=np.int64), cfg, False)[0]


def loss_cond(batch_pi_hat, batch_labels, tau: float, cfg: TrainConfig) -> np.ndarray:
    """Per-class negated smoothed coverage over the given samples.

    Classes absent from the batch get NaN and are left out of the average.
    """
    P = np.atleast_2d(np.asarray(batch_pi_hat, dtype=np.float64))
    y = np.asarray(batch_labels, dtype=np.int64)
    K = P.shape[1]
    V, _ = _aps_fixed_order(P)
    cov = _sigmoid((tau - V[np.arange(y.size), y]) / cfg.sig_temp)
    counts = np.bincount(y, minlength=K)
    sums = np.bincount(y, weights=cov, minlength=K)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, -sums / counts, np.nan)


def _objective(P: np.ndarray, labels: np.ndarray, cfg: TrainConfig, need_grad: bool):
    """Loss breakdown and, optionally, the gradient with respect to ``P``."""
    B, K = P.shape
    rows = np.arange(B)
    py = P[rows, labels]
    focal = float(np.mean(_focal_terms(py, cfg.gamma)))
    gP = np.zeros_like(P) if need_grad else None
    if need_grad:
        gP[rows, labels] += _focal_grad(py, cfg.gamma) / B

    ineff = 0.0
    cond = 0.0
    run_cp_sim = cfg.beta > 0 or cfg.conditional
    if run_cp_sim:
        ineff, st = _ineff_parts(P, labels, cfg, need_grad)
        V, test_idx, cal_idx = st["V"], st["test_idx"], st["cal_idx"]
        gV = np.zeros_like(P) if need_grad else None
        g_tau = 0.0
        if need_grad and cfg.beta > 0:
            active = (st["sizes"] > cfg.kappa).astype(np.float64) / test_idx.size
            dsig = st["sig"] * (1.0 - st["sig"]) / cfg.sig_temp
            coef = cfg.beta * active[:, None] * dsig
            g_tau += coef.sum()
            gV[test_idx] -= coef
        if cfg.conditional:
            y_cal = labels[cal_idx]
            sig_c = _sigmoid((st["tau"] - V[cal_idx, y_cal]) / cfg.sig_temp)
            counts = np.bincount(y_cal, minlength=K)
            present = np.flatnonzero(counts)
            per_class = np.bincount(y_cal, weights=sig_c, minlength=K)[present] / counts[present]
            cond = float(per_class.mean())
            if need_grad:
                # d(-cond)/d sig_c[i] = -1 / (|present| * n_{y_i})
                dsig_c = sig_c * (1.0 - sig_c) / cfg.sig_temp
                coef_c = -dsig_c / (present.size * counts[y_cal])
                g_tau += coef_c.sum()
                gV[cal_idx, y_cal] -= coef_c
        if need_grad:
            gV[cal_idx, labels[cal_idx]] += g_tau * st["w"]
            gP += _aps_vjp(gV, st["order"])

    total = focal + cfg.beta * ineff - cond
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0).sum(axis=1)
    br = LossBreakdown(total, focal, ineff, cond, float(ent.mean()))
    return br, gP


def total_loss(batch_base, batch_labels, params: AdapterParams, cfg: TrainConfig) -> LossBreakdown:
    _, P = forward(params, np.atleast_2d(batch_base))
    return _objective(P, np.asarray(batch_labels, dtype=np.int64), cfg, False)[0]


def backward(batch_base, batch_labels, params: AdapterParams, cfg: TrainConfig):
    """Exact gradient of :func:`total_loss`, shaped like ``params``.

    Returns ``(LossBreakdown, AdapterParams)`` with the gradient in the second
    slot.
    """
    x = _inputs(params, np.atleast_2d(np.asarray(batch_base, dtype=np.float64)))
    acts, pre = _forward_cache(params, x)
    P = softmax(acts[-1])
    br, gP = _objective(P, np.asarray(batch_labels, dtype=np.int64), cfg, True)
    if not math.isfinite(br.total):
        raise TrainingError(f"non-finite loss {br.total!r} (focal={br.focal}, ineff={br.ineff})")
    # softmax vector-Jacobian product
    g = P * (gP - (gP * P).sum(axis=1, keepdims=True))
    gW: List[np.ndarray] = [None] * len(params.weights)
    gb: List[np.ndarray] = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gW[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i:
            g = (g @ params.weights[i].T) * (pre[i - 1] > 0)
    return br, AdapterParams(gW, gb, params.log_input)


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam with decoupled weight decay, in place on an ``AdapterParams``."""

    def __init__(self, params: AdapterParams, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: AdapterParams, grads: AdapterParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- training


def _cp_halves(probs, labels, alpha):
    """Calibrate on each half of a set and evaluate on the other; average."""
    n = labels.size
    half = n // 2
    parts = [(np.arange(half), np.arange(half, n)), (np.arange(half, n), np.arange(half))]
    cov, eff = [], []
    for cal_i, test_i in parts:
        cal = calibrate_on(probs[cal_i], labels[cal_i], alpha)
        mask = predict_sets(probs[test_i], cal)
        cov.append(mask[np.arange(test_i.size), labels[test_i]].mean())
        eff.append(mask.sum(axis=1).mean())
    return float(np.mean(cov)), float(np.mean(eff))


def validation_metrics(params: AdapterParams, valid: Dataset, alpha: float) -> Dict[str, float]:
    _, P = forward(params, valid.probs)
    cov, eff = _cp_halves(P, np.asarray(valid.labels), alpha)
    return {"val_coverage": cov, "val_efficiency": eff, "val_entropy": float(np.mean(entropy(P)))}


def train(train_set: Dataset, valid_set: Dataset, cfg: TrainConfig, init: Optional[AdapterParams] = None):
    """Fit an adapter with AdamW; return ``(best_params, history)``.

    The returned snapshot has the lowest validation efficiency among epochs
    whose validation coverage is at least ``1 - alpha - 0.01`` (the last
    epoch if none qualifies). Validation CP calibrates on one half of
    ``valid_set`` and evaluates on the other, both ways round.
    """
    if train_set.K != valid_set.K:
        raise DomainError("train and validation sets disagree on K")
    params = init.copy() if init is not None else init_params(train_set.K, cfg.hidden, cfg.seed, cfg.log_input, cfg.init)
    history: List[Dict] = []
    if cfg.epochs == 0:
        return params, history
    rng = np.random.default_rng(cfg.seed + 1)
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    X = np.asarray(train_set.probs)
    Y = np.asarray(train_set.labels)
    floor = 1.0 - cfg.alpha - 0.01
    best, best_eff = None, math.inf
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train_set.n)
        sums = np.zeros(5)
        n_batches = 0
        for start in range(0, train_set.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if idx.size < 4:
                continue
            try:
                br, grads = backward(X[idx], Y[idx], params, cfg)
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch=epoch) from None
            opt.step(params, grads)
            sums += [br.total, br.focal, br.ineff, br.cond, br.entropy_mean]
            n_batches += 1
        if not params.is_finite():
            raise TrainingError("parameters became non-finite", epoch=epoch)
        means = sums / max(n_batches, 1)
        record = dict(zip(("total", "focal", "ineff", "cond", "entropy_mean"), means.tolist()))
        record["epoch"] = epoch
        record.update(validation_metrics(params, valid_set, cfg.alpha))
        history.append(record)
        if record["val_coverage"] >= floor and record["val_efficiency"] < best_eff:
            best, best_eff = params.copy(), record["val_efficiency"]
        logger.debug("epoch %d: %s", epoch, record)
    if best is None:
        best = params.copy()
    return best, history


# ---------------------------------------------------------------- file format


def save_params(params: AdapterParams, path) -> None:
    """Write the little-endian ``ECC3`` binary format.

    Layout: magic, u32 version, u32 flags, u32 layer count L, L+1 u32 dims,
    then per layer the row-major float64 weights followed by the biases.
    """
    dims = params.layer_dims
    flags = FLAG_LOG_INPUT if params.log_input else 0
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, flags, len(params.weights)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for a in params.arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> AdapterParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DomainError("not an adapter file (bad magic)")
    try:
        return _parse_params(data)
    except (struct.error, ValueError) as exc:
        raise DomainError(f"truncated or corrupt adapter file: {exc}") from None


def _parse_params(data: bytes) -> AdapterParams:
    version, flags, n_layers = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise DomainError(f"unsupported adapter format version {version}")
    off = 16
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += 4 * (n_layers + 1)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(data, dtype="<f8", count=a * b, offset=off).reshape(a, b).astype(np.float64)
        off += 8 * a * b
        bias = np.frombuffer(data, dtype="<f8", count=b, offset=off).astype(np.float64)
        off += 8 * b
        weights.append(W)
        biases.append(bias)
    if off != len(data):
        raise DomainError("adapter file has trailing or missing bytes")
    return AdapterParams(weights, biases, bool(flags & FLAG_LOG_INPUT))
