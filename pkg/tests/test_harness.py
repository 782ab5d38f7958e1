import json
import math

import numpy as np
import pytest

from ec3 import harness
from ec3.conformal import split_indices
from ec3.errors import ConfigError, IngestError
from ec3.harness import (
    ExperimentConfig, cmd_evaluate, cmd_sweep, cmd_synth_gen, cmd_train, cmd_verify_bounds, config_from_mapping,
    ingest, load_config, summarize, write_report,
)


def write(path, text):
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------- ingest


def test_ingest_example(tmp_path):
    d = ingest(write(tmp_path / "p.csv", "0.6,0.4\n0.5,0.5\n0.1,0.9\n"), write(tmp_path / "y.csv", "0\n1\n1\n"))
    assert d.n == 3 and d.K == 2
    np.testing.assert_array_equal(d.labels, [0, 1, 1])


def test_ingest_renormalises_within_tolerance(tmp_path):
    d = ingest(write(tmp_path / "p.csv", "0.5,0.499999\n0.5,0.5\n"), write(tmp_path / "y.csv", "0\n1\n"))
    assert d.probs[0].sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize(
    "probs,labels,row",
    [
        ("0.6,0.4\n0.5,0.5\n", "0\n5\n", 2),
        ("0.6,0.4\n0.5\n", "0\n1\n", 2),
        ("0.6,0.4\nnan,0.5\n", "0\n1\n", 2),
        ("0.6,0.4\n0.5,abc\n", "0\n1\n", 2),
        ("0.6,0.4\n0.5,0.5\n0.7,0.7\n", "0\n1\n0\n", 3),
        ("0.6,0.4\n1.2,-0.2\n", "0\n1\n", 2),
        ("0.6,0.4\n0.5,0.5\n", "0\n1.5\n", 2),
        ("0.6,0.4\n0.5,0.5\n", "0\n", 2),
    ],
)
def test_ingest_errors_name_the_row(tmp_path, probs, labels, row):
    with pytest.raises(IngestError) as err:
        ingest(write(tmp_path / "p.csv", probs), write(tmp_path / "y.csv", labels))
    assert err.value.row == row
    assert f"row {row}" in str(err.value)


def test_ingest_oracle_shape(tmp_path):
    p = write(tmp_path / "p.csv", "0.6,0.4\n0.5,0.5\n")
    y = write(tmp_path / "y.csv", "0\n1\n")
    with pytest.raises(IngestError):
        ingest(p, y, write(tmp_path / "o.csv", "0.6,0.4\n"))
    with pytest.raises(IngestError):
        ingest(str(tmp_path / "missing.csv"), y)


def test_matrix_round_trip(tmp_path):
    a = np.random.default_rng(0).dirichlet(np.ones(4), size=5)
    harness.write_matrix(str(tmp_path / "a.csv"), a)
    harness.write_labels(str(tmp_path / "y.csv"), [0, 3, 2, 1, 0])
    d = ingest(str(tmp_path / "a.csv"), str(tmp_path / "y.csv"))
    np.testing.assert_array_equal(d.probs, a)


# ---------------------------------------------------------------- config


def test_load_config_tables_and_overrides(tmp_path):
    path = write(tmp_path / "run.toml", 'alpha = 0.2\nseed = 4\n[synth]\nK = 5\nn = 400\n')
    cfg = load_config(path, {"seed": 9, "beta": None})
    assert (cfg.alpha, cfg.seed, cfg.synth_K, cfg.synth_n, cfg.beta) == (0.2, 9, 5, 400, 0.1)
    assert cfg.base_dir == str(tmp_path)


@pytest.mark.parametrize(
    "text",
    ["alpha = 1.5\n", "bogus = 1\n", "alpha = \n", "split = [1, 2]\n", "n_conformal_splits = 0\n",
     "score = 'saps'\n", "probs = 'p.csv'\n", "grid = [1.0, -2.0]\n", "synth_K = 1\n", "hidden = 3\n"],
)
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "bad.toml", text))


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.toml"))


def test_config_digest_is_stable():
    a = config_from_mapping({"alpha": 0.1, "hidden": [8]})
    b = config_from_mapping({"hidden": (8,), "alpha": 0.1})
    assert a.digest() == b.digest()
    assert a.digest() != config_from_mapping({"alpha": 0.2}).digest()


# ---------------------------------------------------------------- commands


def small(**kw):
    base = dict(synth_n=1500, n_conformal_splits=5, wsc_directions=20, epochs=2, grid_n=6, trials=5,
                fuzz_samples=500, fuzz_K=(2, 10))
    base.update(kw)
    return ExperimentConfig(**base)


def test_evaluate_oracle_coverage():
    rep = cmd_evaluate(ExperimentConfig(synth_distortion="none", n_conformal_splits=100, wsc_directions=0))
    cov = rep["aggregate"]["coverage"]
    assert abs(cov["mean"] - 0.9) <= 0.01 and cov["std"] > 0
    assert len(rep["splits"]) == 100 and rep["n_pool"] == 7000


def test_evaluate_uniform_predictions(tmp_path):
    n = 2000
    harness.write_matrix(str(tmp_path / "p.csv"), np.full((n, 10), 0.1))
    harness.write_labels(str(tmp_path / "y.csv"), np.random.default_rng(0).integers(0, 10, n))
    cfg = ExperimentConfig(probs=str(tmp_path / "p.csv"), labels=str(tmp_path / "y.csv"), n_conformal_splits=3,
                           wsc_directions=0)
    eff = cmd_evaluate(cfg)["aggregate"]["efficiency"]
    assert abs(eff["mean"] - 9) <= 1


def test_single_split_has_zero_std():
    rep = cmd_evaluate(small(n_conformal_splits=1))
    scalars = [v for v in rep["aggregate"].values() if isinstance(v, dict) and not math.isnan(v["mean"])]
    assert scalars and all(v["std"] == 0 for v in scalars)


def test_aggregate_recomputes_from_records():
    rep = cmd_evaluate(small())
    effs = [r["efficiency"] for r in rep["splits"]]
    assert rep["aggregate"]["efficiency"]["mean"] == pytest.approx(np.mean(effs), abs=1e-12)
    assert rep["aggregate"]["efficiency"]["std"] == pytest.approx(np.std(effs, ddof=1), abs=1e-12)
    assert summarize(rep["splits"]) == rep["aggregate"]
    assert rep["config_hash"] == small().digest() and rep["seed"] == 0


def test_conformal_replicas_use_seed_plus_index():
    cfg = small(seed=3)
    cal, test = harness.conformal_split(100, cfg, 2)
    want = split_indices(100, (4, 3), 5)
    np.testing.assert_array_equal(cal, want[0])
    np.testing.assert_array_equal(test, want[1])


def test_sweep_unit_grid_equals_evaluate():
    cfg = small(grid=(1.0,), n_conformal_splits=1)
    sw = cmd_sweep(cfg)
    ev = cmd_evaluate(cfg)["splits"][0]
    (pt,) = sw["sweep"]
    assert pt["efficiency"] == ev["efficiency"]
    assert pt["coverage"] == ev["coverage"]
    assert pt["mean_entropy"] == ev["mean_entropy"]


def test_sweep_selection_and_csv(tmp_path):
    rep = cmd_sweep(small(entropy_threshold=0.5))
    assert len(rep["sweep"]) == 6 and rep["pareto"]
    assert rep["selection"]["mean_entropy"] <= 0.5
    files = write_report(rep, str(tmp_path))
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "temperature,mean_entropy,efficiency,coverage" and len(rows) == 7
    temps = [float(r.split(",")[0]) for r in rows[1:]]
    assert temps == sorted(temps)
    assert set(files) >= {"report.json", "sweep.csv", "pareto.csv"}


def test_train_report_and_adapter(tmp_path):
    cfg = small(out=str(tmp_path))
    rep = cmd_train(cfg, str(tmp_path))
    assert (tmp_path / "adapter.ecc3").exists()
    (run,) = rep["runs"]
    assert len(run["history"]) == 2 and len(run["splits"]) == 5
    files = write_report(rep, str(tmp_path))
    assert {"baseline_splits.csv", "splits.csv", "history.csv"} <= set(files)
    # the saved adapter reproduces the corrected evaluation
    ev = cmd_evaluate(small(adapter=str(tmp_path / "adapter.ecc3")))
    assert ev["splits"] == run["splits"]


def test_train_repeats(tmp_path):
    rep = cmd_train(small(repeats=2, epochs=1), str(tmp_path))
    assert [r["train_seed"] for r in rep["runs"]] == [0, 1]
    assert (tmp_path / "adapter_0.ecc3").exists() and (tmp_path / "adapter_1.ecc3").exists()
    assert "aggregate_over_runs" in rep


def test_verify_bounds_small(tmp_path):
    rep = cmd_verify_bounds(small())
    assert rep["prop1"]["fuzz"]["violations"] == 0
    assert rep["prop1"]["one_hot_K2"]["slack"] == 0.0
    assert rep["monte_carlo"]["trials"] == 5
    assert not rep["violation"]
    files = write_report(rep, str(tmp_path))
    assert {"prop1.csv", "bounds.csv"} <= set(files)


def test_verify_bounds_without_oracle(tmp_path):
    gen = cmd_synth_gen(small(synth_n=300), str(tmp_path))
    assert gen["files"] == ["probs.csv", "labels.csv", "oracle.csv"]
    cfg = small(probs=str(tmp_path / "probs.csv"), labels=str(tmp_path / "labels.csv"))
    rep = cmd_verify_bounds(cfg)
    assert rep["monte_carlo"] is None and rep["warnings"]
    with_oracle = cmd_verify_bounds(small(probs=str(tmp_path / "probs.csv"), labels=str(tmp_path / "labels.csv"),
                                          oracle=str(tmp_path / "oracle.csv")))
    assert with_oracle["monte_carlo"]["trials"] == 5


def test_synth_gen_round_trip(tmp_path):
    cfg = small(synth_n=200, seed=5)
    cmd_synth_gen(cfg, str(tmp_path))
    d = ingest(str(tmp_path / "probs.csv"), str(tmp_path / "labels.csv"), str(tmp_path / "oracle.csv"))
    ref, _ = harness.load_data(cfg)
    np.testing.assert_array_equal(d.probs, ref.probs)
    np.testing.assert_array_equal(d.labels, ref.labels)


@pytest.mark.parametrize("command", ["evaluate", "train", "sweep", "verify-bounds", "synth-gen"])
def test_reports_are_byte_identical(tmp_path, command):
    from ec3.cli import run

    cfg = small(out=str(tmp_path))
    outs = []
    for _ in range(2):
        write_report(run(command, cfg), cfg.out)
        outs.append({p.name: p.read_bytes() for p in sorted(tmp_path.iterdir())})
    assert outs[0] == outs[1]
    report = json.loads(outs[0]["report.json"])
    assert report["command"] == command and report["version"]


def test_report_json_has_no_nan(tmp_path):
    rep = cmd_evaluate(small(wsc_directions=0))
    write_report(rep, str(tmp_path))
    text = (tmp_path / "report.json").read_text()
    assert "NaN" not in text and "Infinity" not in text
    json.loads(text)
