"""Experiment orchestration: config, ingestion, commands and report writing.

Every command returns a plain ``dict`` report. :func:`write_report` stores it
as ``report.json`` (sorted keys, no timestamps) plus flat CSV tables, so a
re-run with the same config and seed is byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .adapter import TrainConfig, forward, load_params, save_params, train
from .bounds import DEFAULT_TAU, monte_carlo, prop1_check, prop1_fuzz
from .conformal import calibrate_on, predict_sets, split_dataset, split_indices
from .errors import ConfigError, DomainError, IngestError
from .metrics import WSC_DELTA, EvalReport, aggregate, coverage_distance, evaluate, mean_std
from .probs import RENORM_LIMIT, SIMPLEX_TOL, Dataset
from .scores import ScoreConfig
from .synth import SynthConfig, default_imbalanced, generate, imbalanced_variant, with_seed
from .tempering import default_grid, pareto_filter, select_by_entropy, temp_sweep

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

ADAPTER_FILE = "adapter.ecc3"


@dataclass
class ExperimentConfig:
    """Flat experiment settings; TOML tables are flattened as ``table_key``.

    Without ``probs`` the data comes from the synthetic generator configured
    by the ``synth_*`` keys.
    """

    probs: Optional[str] = None
    labels: Optional[str] = None
    oracle: Optional[str] = None
    adapter: Optional[str] = None
    alpha: float = 0.1
    score: str = "aps"
    raps_lambda: float = 0.1
    raps_kreg: int = 1
    randomized: bool = False
    split: Tuple[float, ...] = (2, 1, 4, 3)
    n_conformal_splits: int = 100
    wsc_directions: int = 100
    wsc_delta: float = WSC_DELTA
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
    repeats: int = 1
    grid: Optional[Tuple[float, ...]] = None
    grid_min: float = 0.05
    grid_max: float = 20.0
    grid_n: int = 40
    entropy_threshold: Optional[float] = None
    tau: float = DEFAULT_TAU
    trials: int = 200
    fuzz_K: Tuple[int, ...] = (2, 5, 10, 50, 100)
    fuzz_samples: int = 100_000
    synth_K: int = 10
    synth_n: int = 10_000
    synth_concentration: float = 0.1
    synth_distortion: str = "sharpen"
    synth_distortion_param: float = 0.25
    synth_priors: Optional[Tuple[float, ...]] = None
    synth_rare_temperature: float = 0.3
    synth_imbalanced: bool = False
    seed: int = 0
    out: str = "out"
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        for name in ("split", "hidden", "grid", "fuzz_K", "synth_priors"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, tuple):
                if not isinstance(v, (list, tuple)):
                    raise ConfigError(f"{name} must be a list")
                setattr(self, name, tuple(v))
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_conformal_splits < 1:
            raise ConfigError("n_conformal_splits must be at least 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if len(self.split) != 4 or any(r <= 0 for r in self.split):
            raise ConfigError("split needs four positive ratios (train, valid, cal, test)")
        if self.probs is not None and self.labels is None:
            raise ConfigError("probs given without labels")
        if self.entropy_threshold is not None and not self.entropy_threshold > 0:
            raise ConfigError("entropy_threshold must be positive")
        if self.wsc_directions < 0:
            raise ConfigError("wsc_directions must be non-negative")
        try:
            self.score_config()
            self.train_config()
            self.sweep_grid()
            if self.probs is None:
                self.synth_config()
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    def resolve(self, path: Optional[str]) -> Optional[str]:
        if path is None:
            return None
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def score_config(self) -> ScoreConfig:
        return ScoreConfig(self.score, self.raps_lambda, self.raps_kreg, self.randomized)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, epochs=self.epochs, batch_size=self.batch_size,
            sig_temp=self.sig_temp, kappa=self.kappa, conditional=self.conditional,
            hidden=self.hidden, log_input=self.log_input, init=self.init,
            seed=self.seed if seed is None else seed,
        )

    def synth_config(self) -> SynthConfig:
        priors = self.synth_priors
        if self.synth_imbalanced and priors is None:
            priors = default_imbalanced().priors
        return SynthConfig(
            K=self.synth_K, n=self.synth_n, concentration=self.synth_concentration,
            distortion=self.synth_distortion, distortion_param=self.synth_distortion_param,
            priors=priors, rare_temperature=self.synth_rare_temperature, seed=self.seed,
        )

    def sweep_grid(self) -> np.ndarray:
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if g.size == 0 or np.any(~np.isfinite(g)) or np.any(g <= 0):
                raise ConfigError("grid temperatures must be positive")
            return g
        if not 0 < self.grid_min <= self.grid_max or self.grid_n < 1:
            raise ConfigError("need 0 < grid_min <= grid_max and grid_n >= 1")
        return default_grid(self.grid_n, self.grid_min, self.grid_max)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d.pop("base_dir")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


FIELD_NAMES = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}


def _flatten(table: Dict, prefix: str = "") -> Dict:
    flat = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "_"))
        else:
            flat[key] = v
    return flat


def config_from_mapping(values: Dict, base_dir: str = ".") -> ExperimentConfig:
    flat = _flatten(values)
    unknown = sorted(set(flat) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**flat, base_dir=base_dir)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Optional[str], overrides: Optional[Dict] = None) -> ExperimentConfig:
    """Read a TOML config (``None`` means all defaults) and apply overrides."""
    values: Dict = {}
    base_dir = "."
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base_dir = os.path.dirname(os.path.abspath(path))
    values = _flatten(values)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(values, base_dir)


# ---------------------------------------------------------------- ingestion


def _read_rows(path: str) -> List[List[str]]:
    try:
        with open(path, newline="") as fh:
            return [row for row in csv.reader(fh)]
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc.strerror}", row=0) from None


def _read_matrix(path: str, what: str) -> np.ndarray:
    rows = _read_rows(path)
    if not rows:
        raise IngestError(f"{what} file {path} is empty", row=0)
    K = len(rows[0])
    out = np.empty((len(rows), K))
    for i, row in enumerate(rows, start=1):
        if len(row) != K:
            raise IngestError(f"{what}: expected {K} columns, found {len(row)}", row=i)
        try:
            vals = [float(x) for x in row]
        except ValueError:
            raise IngestError(f"{what}: non-numeric value", row=i) from None
        if not all(math.isfinite(v) for v in vals):
            raise IngestError(f"{what}: non-finite value", row=i)
        if any(v < 0 or v > 1 + RENORM_LIMIT for v in vals):
            raise IngestError(f"{what}: probability outside [0, 1]", row=i)
        out[i - 1] = vals
    if K < 2:
        raise IngestError(f"{what}: need at least two classes", row=1)
    dev = np.abs(out.sum(axis=1) - 1.0)
    bad = np.flatnonzero(dev > RENORM_LIMIT)
    if bad.size:
        raise IngestError(f"{what}: row sums to {out[bad[0]].sum():.9g}, not 1", row=int(bad[0]) + 1)
    fix = dev > SIMPLEX_TOL
    out[fix] /= out[fix].sum(axis=1, keepdims=True)
    return out


def _read_labels(path: str, K: int) -> np.ndarray:
    rows = _read_rows(path)
    out = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows, start=1):
        if len(row) != 1:
            raise IngestError("labels: expected one column", row=i)
        try:
            y = int(row[0].strip())
        except ValueError:
            raise IngestError(f"labels: {row[0]!r} is not an integer", row=i) from None
        if not 0 <= y < K:
            raise IngestError(f"labels: {y} outside [0, {K})", row=i)
        out[i - 1] = y
    return out


def ingest(probs_path: str, labels_path: str, oracle_path: Optional[str] = None) -> Dataset:
    """Load header-less CSV files into a validated :class:`Dataset`."""
    P = _read_matrix(probs_path, "probs")
    y = _read_labels(labels_path, P.shape[1])
    if y.size != P.shape[0]:
        raise IngestError(f"{P.shape[0]} probability rows but {y.size} labels", row=min(y.size, P.shape[0]) + 1)
    oracle = None
    if oracle_path is not None:
        oracle = _read_matrix(oracle_path, "oracle")
        if oracle.shape != P.shape:
            raise IngestError(f"oracle shape {oracle.shape} differs from probs {P.shape}",
                              row=min(oracle.shape[0], P.shape[0]) + 1)
    return Dataset(P, y, oracle)


def write_matrix(path: str, a: np.ndarray) -> None:
    a = np.atleast_2d(a)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in a:
            w.writerow([repr(float(x)) for x in row])


def write_labels(path: str, y: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in y)


def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, bool]:
    """Dataset for ``cfg`` and whether it came from the synthetic generator."""
    if cfg.probs is not None:
        return ingest(cfg.resolve(cfg.probs), cfg.resolve(cfg.labels), cfg.resolve(cfg.oracle)), False
    return _synth(cfg.synth_config(), cfg.synth_imbalanced), True


def _synth(sc: SynthConfig, imbalanced: bool) -> Dataset:
    return imbalanced_variant(sc) if imbalanced else generate(sc)


# ---------------------------------------------------------------- evaluation


def pool_of(d: Dataset, cfg: ExperimentConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """``(train, valid, pool)`` with ``pool`` the union of the cal and test blocks."""
    if d.n < len(cfg.split):
        raise DomainError(f"need at least {len(cfg.split)} samples to split, got {d.n}")
    tr, va, ca, te = split_indices(d.n, cfg.split, cfg.seed)
    return d.subset(tr), d.subset(va), d.subset(np.sort(np.concatenate([ca, te])))


def conformal_split(n: int, cfg: ExperimentConfig, i: int) -> Tuple[np.ndarray, np.ndarray]:
    """Calibration and test indices of replica ``i`` (seed ``seed + i``)."""
    cal, test = split_indices(n, cfg.split[2:], cfg.seed + i)
    return cal, test


def evaluate_pool(probs: np.ndarray, labels: np.ndarray, cfg: ExperimentConfig) -> List[Dict]:
    """Run ``n_conformal_splits`` re-splits of a pool and score each one."""
    sc = cfg.score_config()
    records = []
    for i in range(cfg.n_conformal_splits):
        cal_i, test_i = conformal_split(labels.size, cfg, i)
        rng = np.random.default_rng(cfg.seed + i)
        cal = calibrate_on(probs[cal_i], labels[cal_i], cfg.alpha, sc, rng)
        mask = predict_sets(probs[test_i], cal, rng)
        rep = evaluate(probs[test_i], mask, labels[test_i], cfg.alpha, cfg.wsc_directions, cfg.wsc_delta, cfg.seed + i)
        rec = {"split": i, "eta_hat": cal.eta_hat if math.isfinite(cal.eta_hat) else None}
        rec.update(rep.to_dict())
        cc = rep.class_coverage
        rec["class_coverage_min"] = float(np.nanmin(cc)) if not np.all(np.isnan(cc)) else None
        rec["coverage_distance_L1"] = coverage_distance(cc, 1 - cfg.alpha, "L1")
        rec["coverage_distance_L2"] = coverage_distance(cc, 1 - cfg.alpha, "L2")
        records.append(rec)
    return records


def summarize(records: List[Dict]) -> Dict:
    """Mean and std per scalar metric, recomputable from ``records``."""
    reps = [
        EvalReport(r["coverage"], r["efficiency"], r["mean_entropy"],
                   [math.nan if c is None else c for c in r["class_coverage"]],
                   math.nan if r["wsc"] is None else r["wsc"], r["sscv"], r["empty_set_rate"])
        for r in records
    ]
    out = aggregate(reps)
    for name in ("class_coverage_min", "coverage_distance_L1", "coverage_distance_L2"):
        m, s = mean_std(math.nan if r[name] is None else r[name] for r in records)
        out[name] = {"mean": m, "std": s}
    return out


def _base(cfg: ExperimentConfig, command: str) -> Dict:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
    }


def _pool_probs(cfg: ExperimentConfig, pool: Dataset) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Pool probabilities, corrected by ``cfg.adapter`` when one is set, and logits."""
    if cfg.adapter is None:
        return np.asarray(pool.probs), None
    params = load_params(cfg.resolve(cfg.adapter))
    if params.K != pool.K:
        raise ConfigError(f"adapter expects K={params.K}, data has K={pool.K}")
    z, P = forward(params, pool.probs)
    return P, z


def cmd_evaluate(cfg: ExperimentConfig) -> Dict:
    d, _ = load_data(cfg)
    _, _, pool = pool_of(d, cfg)
    P, _ = _pool_probs(cfg, pool)
    records = evaluate_pool(P, np.asarray(pool.labels), cfg)
    rep = _base(cfg, "evaluate")
    rep.update({"n_pool": pool.n, "K": pool.K, "splits": records, "aggregate": summarize(records)})
    return rep


def cmd_train(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> Dict:
    """Train ``repeats`` adapters (seeds ``seed + r``) and evaluate base and corrected sets."""
    d, _ = load_data(cfg)
    tr, va, pool = pool_of(d, cfg)
    labels = np.asarray(pool.labels)
    base_records = evaluate_pool(np.asarray(pool.probs), labels, cfg)
    runs = []
    for r in range(cfg.repeats):
        tc = cfg.train_config(cfg.seed + r)
        params, history = train(tr, va, tc)
        name = ADAPTER_FILE if cfg.repeats == 1 else f"adapter_{r}.ecc3"
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            save_params(params, os.path.join(out_dir, name))
        _, P = forward(params, pool.probs)
        records = evaluate_pool(P, labels, cfg)
        runs.append({
            "train_seed": tc.seed,
            "adapter_file": name,
            "history": history,
            "splits": records,
            "aggregate": summarize(records),
        })
    rep = _base(cfg, "train")
    rep.update({
        "n_pool": pool.n,
        "K": pool.K,
        "baseline": {"splits": base_records, "aggregate": summarize(base_records)},
        "runs": runs,
    })
    if cfg.repeats > 1:
        rep["aggregate_over_runs"] = summarize([s for run in runs for s in run["splits"]])
    return rep


def cmd_sweep(cfg: ExperimentConfig) -> Dict:
    """Temperature sweep on conformal split 0 of the pool."""
    d, _ = load_data(cfg)
    _, _, pool = pool_of(d, cfg)
    P, z = _pool_probs(cfg, pool)
    cal_i, test_i = conformal_split(pool.n, cfg, 0)
    kw = dict(alpha=cfg.alpha, grid=cfg.sweep_grid(), cfg=cfg.score_config(), seed=cfg.seed)
    if z is None:
        points = temp_sweep(None, pool.labels, cal_i, test_i, probs=P, **kw)
    else:
        points = temp_sweep(z, pool.labels, cal_i, test_i, **kw)
    front = pareto_filter(points)
    rep = _base(cfg, "sweep")
    rep.update({
        "n_pool": pool.n,
        "K": pool.K,
        "sweep": [p.to_dict() for p in points],
        "pareto": [p.to_dict() for p in front],
        "entropy_threshold": cfg.entropy_threshold,
        "selection": None,
    })
    if cfg.entropy_threshold is not None:
        sel = select_by_entropy(points, cfg.entropy_threshold)
        rep["selection"] = None if sel is None else sel.to_dict()
    return rep


def _mc_draw(cfg: ExperimentConfig, d: Dataset, synthetic: bool):
    sc = cfg.synth_config() if synthetic else None

    def draw(t):
        if synthetic:
            fresh = _synth(with_seed(sc, cfg.seed + t), cfg.synth_imbalanced)
            _, _, ca, te = split_dataset(fresh, cfg.split, cfg.seed + t)
            return ca, te
        _, _, pool = pool_of(d, cfg)
        cal_i, test_i = conformal_split(pool.n, cfg, t)
        return pool.subset(cal_i), pool.subset(test_i)

    return draw


def cmd_verify_bounds(cfg: ExperimentConfig) -> Dict:
    """Per-sample fuzz always; quantile and set-size Monte Carlo when oracles exist.

    With synthetic data every trial draws a fresh dataset; ingested data is
    re-split instead.
    """
    rep = _base(cfg, "verify-bounds")
    fuzz = prop1_fuzz(cfg.fuzz_K, cfg.fuzz_samples, cfg.seed)
    tight = prop1_check(np.array([1.0, 0.0]))
    rep["prop1"] = {"fuzz": fuzz, "one_hot_K2": tight.to_dict()}
    violated = fuzz["violations"] > 0
    warnings_out = []
    if cfg.probs is not None and cfg.oracle is None:
        msg = "no oracle file: quantile and set-size checks skipped"
        logger.warning(msg)
        warnings_out.append(msg)
        rep["monte_carlo"] = None
    else:
        d, synthetic = load_data(cfg)
        if cfg.score_config() != ScoreConfig():
            msg = "bounds hold for deterministic APS only; score settings ignored for the Monte-Carlo checks"
            logger.warning(msg)
            warnings_out.append(msg)
        mc = monte_carlo(_mc_draw(cfg, d, synthetic), cfg.alpha, cfg.tau, cfg.trials, keep_reports=True)
        reports = mc.pop("reports")
        rep["monte_carlo"] = mc
        rep["bound_reports"] = [
            dict(r.to_dict(), trial=t) for name in ("prop2", "thm2") for t, r in enumerate(reports[name])
        ]
        violated = violated or not (mc["prop2"]["passed"] and mc["thm2"]["passed"])
    rep["warnings"] = warnings_out
    rep["violation"] = bool(violated)
    return rep


def cmd_synth_gen(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """Write ``probs.csv``, ``labels.csv`` and ``oracle.csv`` for the synthetic config."""
    sc = cfg.synth_config()
    d = _synth(sc, cfg.synth_imbalanced)
    os.makedirs(out_dir, exist_ok=True)
    write_matrix(os.path.join(out_dir, "probs.csv"), d.probs)
    write_labels(os.path.join(out_dir, "labels.csv"), d.labels)
    write_matrix(os.path.join(out_dir, "oracle.csv"), d.oracle)
    rep = _base(cfg, "synth-gen")
    rep.update({"n": d.n, "K": d.K, "files": ["probs.csv", "labels.csv", "oracle.csv"],
                "label_counts": np.bincount(d.labels, minlength=d.K).tolist()})
    return rep


# ---------------------------------------------------------------- reports


def _jsonable(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def _write_csv(path: str, rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> None:
    if not rows:
        return
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else _cell(r.get(c)) for c in columns])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join("" if x is None else repr(x) for x in v)
    return v


def write_report(report: Dict, out_dir: str) -> List[str]:
    """Write ``report.json`` and the CSV tables; return the file names."""
    os.makedirs(out_dir, exist_ok=True)
    written = ["report.json"]
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(_jsonable(report), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")

    def table(name, rows, columns=None):
        if rows:
            _write_csv(os.path.join(out_dir, name), rows, columns)
            written.append(name)

    cmd = report["command"]
    if cmd == "evaluate":
        table("splits.csv", list(report["splits"]))
    elif cmd == "train":
        table("baseline_splits.csv", list(report["baseline"]["splits"]))
        for i, run in enumerate(report["runs"]):
            suffix = "" if len(report["runs"]) == 1 else f"_{i}"
            table(f"splits{suffix}.csv", list(run["splits"]))
            table(f"history{suffix}.csv", run["history"])
    elif cmd == "sweep":
        cols = ["temperature", "mean_entropy", "efficiency", "coverage"]
        table("sweep.csv", report["sweep"], cols)
        table("pareto.csv", report["pareto"], cols)
    elif cmd == "verify-bounds":
        rows = [dict(K=int(k), **v) for k, v in report["prop1"]["fuzz"]["per_K"].items()]
        table("prop1.csv", rows)
        flat = []
        for r in report.get("bound_reports") or []:
            row = {k: v for k, v in r.items() if k != "components"}
            row.update(r["components"])
            flat.append(row)
        if flat:
            cols = sorted({k for row in flat for k in row})
            table("bounds.csv", flat, cols)
    return written

