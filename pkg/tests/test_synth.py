import math

import numpy as np
import pytest

from ec3.conformal import run_cp_masks, split_indices
from ec3.errors import DomainError
from ec3.metrics import class_coverage
from ec3.probs import entropy
from ec3.synth import SynthConfig, default_imbalanced, generate, imbalanced_variant, rare_classes, with_seed


def test_generate_shapes_and_simplex():
    d = generate(SynthConfig(K=7, n=500, seed=3))
    assert d.n == 500 and d.K == 7 and d.oracle is not None
    for a in (d.probs, d.oracle):
        assert np.all(a >= 0) and np.allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_same_seed_same_data():
    a, b = generate(SynthConfig(n=300, seed=5)), generate(SynthConfig(n=300, seed=5))
    np.testing.assert_array_equal(a.probs, b.probs)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.oracle, b.oracle)
    c = generate(with_seed(SynthConfig(n=300, seed=5), 6))
    assert not np.array_equal(a.labels, c.labels)


def test_none_distortion_is_oracle():
    d = generate(SynthConfig(n=200, distortion="none"))
    np.testing.assert_array_equal(d.probs, d.oracle)


def test_sharpen_and_blur_move_entropy():
    sharp = generate(SynthConfig(n=2000, seed=1))
    assert entropy(sharp.probs).mean() < entropy(sharp.oracle).mean()
    blur = generate(SynthConfig(n=2000, seed=1, distortion="blur", distortion_param=2.0))
    assert entropy(blur.probs).mean() > entropy(blur.oracle).mean()
    noisy = generate(SynthConfig(n=200, distortion="logit_noise", distortion_param=0.5))
    assert not np.allclose(noisy.probs, noisy.oracle)


def test_labels_follow_oracle():
    d = generate(SynthConfig(K=4, n=20_000, concentration=1.0, distortion="none", seed=9))
    # E[1{Y=k}] = E[pi_k], so the per-class residual is zero-mean with bounded variance
    resid = (np.eye(4)[d.labels] - d.oracle).mean(axis=0)
    assert np.all(np.abs(resid) < 4 * 0.5 / math.sqrt(d.n))


def test_oracle_calibrated_coverage():
    d = generate(SynthConfig(n=7000, distortion="none", seed=0))
    covs = []
    for i in range(100):
        cal, test = split_indices(d.n, (4, 3), seed=i)
        _, mask = run_cp_masks(d.subset(cal), d.subset(test), 0.1)
        covs.append(mask[np.arange(test.size), np.asarray(d.labels)[test]].mean())
    assert abs(np.mean(covs) - 0.9) <= 0.01


@pytest.mark.parametrize(
    "bad",
    [
        dict(K=1), dict(n=0), dict(concentration=0.0), dict(distortion="warp"),
        dict(distortion_param=1.5), dict(distortion="blur", distortion_param=0.5),
        dict(distortion="logit_noise", distortion_param=-1.0), dict(rare_temperature=0.0),
        dict(K=3, priors=(0.5, 0.5)), dict(K=2, priors=(0.7, 0.4)), dict(K=2, priors=(1.0, 0.0)),
    ],
)
def test_config_validation(bad):
    with pytest.raises(DomainError):
        SynthConfig(**bad)


def test_imbalanced_needs_priors():
    with pytest.raises(DomainError):
        imbalanced_variant(SynthConfig(n=10))


def test_uniform_priors_match_generate():
    cfg = SynthConfig(n=400, seed=4)
    a = generate(cfg)
    b = imbalanced_variant(SynthConfig(n=400, seed=4, priors=(0.1,) * 10))
    assert rare_classes(SynthConfig(priors=(0.1,) * 10)).size == 0
    np.testing.assert_allclose(a.oracle, b.oracle, rtol=1e-12)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_imbalanced_counts_and_rare_coverage():
    cfg = default_imbalanced(seed=0, n=10_000)
    d = imbalanced_variant(cfg)
    pri = np.asarray(cfg.priors)
    counts = np.bincount(d.labels, minlength=10)
    assert np.all(np.abs(counts - d.n * pri) <= 4 * np.sqrt(d.n * pri * (1 - pri)))
    np.testing.assert_array_equal(rare_classes(cfg), np.arange(1, 10))
    y = np.asarray(d.labels)
    cal, test = split_indices(d.n, (4, 3), seed=0)
    _, mask = run_cp_masks(d.subset(cal), d.subset(test), 0.1)
    cc = class_coverage(mask, y[test], 10)
    assert np.nanmin(cc[1:]) < 0.9
    assert cc[0] > 0.9
