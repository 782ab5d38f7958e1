from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ec3.errors import DomainError
from ec3.scores import (
    APS, ScoreConfig, aps_score, aps_scores_all, avg_score, class_keys, class_scores, label_scores, raps_score,
)


def brute_aps(p, y):
    """Sum of every probability ranked at or above class y (index tie-break)."""
    return sum(p[k] for k in range(len(p)) if (p[k], -k) >= (p[y], -y))


P3 = [0.5, 0.3, 0.2]


def test_aps_examples():
    assert aps_score(P3, 1) == pytest.approx(0.8, abs=1e-15)
    assert aps_score(P3, 0) == 0.5
    assert aps_score(P3, 2) == pytest.approx(1.0, abs=1e-9)


def test_aps_all_examples():
    np.testing.assert_allclose(aps_scores_all(np.full(4, 0.25)), [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(aps_scores_all([0.0, 1.0, 0.0]), [1.0, 1.0, 1.0], atol=1e-9)


def test_aps_all_matches_brute_force(rng):
    for K in (2, 5, 10, 40):
        p = rng.dirichlet(np.full(K, 0.4))
        p[0] = p[K - 1]  # a tie
        p /= p.sum()
        got = aps_scores_all(p)
        np.testing.assert_allclose(got, [brute_aps(p, y) for y in range(K)], rtol=0, atol=1e-12)


def test_aps_bad_label():
    with pytest.raises(DomainError):
        aps_score(P3, 3)
    with pytest.raises(DomainError):
        aps_score(P3, -1)


def test_raps_examples():
    cfg = ScoreConfig("raps", 0.1, 1)
    assert raps_score(P3, 2, cfg) == pytest.approx(1.2, abs=1e-12)
    assert raps_score(P3, 0, cfg) == aps_score(P3, 0)
    zero = ScoreConfig("raps", 0.0, 1)
    assert all(raps_score(P3, y, zero) == aps_score(P3, y) for y in range(3))
    with pytest.raises(DomainError):
        raps_score(P3, 0, APS)


@given(st.integers(2, 12), st.one_of(st.just(0.0), st.floats(1e-6, 2.0)), st.integers(1, 12), st.integers(0, 2**31))
def test_raps_dominates_aps(K, lam, kreg, seed):
    kreg = min(kreg, K)
    p = np.random.default_rng(seed).dirichlet(np.ones(K))
    cfg = ScoreConfig("raps", lam, kreg)
    order = np.argsort(-p, kind="stable")
    for y in range(K):
        rank = int(np.flatnonzero(order == y)[0]) + 1
        r, a = raps_score(p, y, cfg), aps_score(p, y)
        assert r >= a
        if rank <= kreg or lam == 0:
            assert r == a
        else:
            assert r > a


def test_raps_kreg_above_k_rejected():
    with pytest.raises(DomainError):
        class_scores(np.array([P3]), ScoreConfig("raps", 0.1, 4))


@pytest.mark.parametrize("bad", [dict(kind="saps"), dict(raps_lambda=-1.0), dict(raps_kreg=0)])
def test_score_config_validation(bad):
    with pytest.raises(DomainError):
        ScoreConfig(**bad)


def test_avg_score_examples(rng):
    assert avg_score(np.full(4, 0.25)) == pytest.approx(0.625)
    for K in (2, 7, 30):
        assert avg_score(np.eye(K)[1]) == pytest.approx(1.0)
    p = rng.dirichlet(np.ones(10))
    assert avg_score(p) == pytest.approx(np.mean(aps_scores_all(p)), abs=1e-15)
    srt = np.sort(p)[::-1]
    assert avg_score(p) == pytest.approx(sum((10 - k) / 10 * srt[k] for k in range(10)), abs=1e-12)


def test_avg_score_range_fuzz():
    rng = np.random.default_rng(7)
    for K in (2, 3, 10, 50, 100):
        conc = np.exp(rng.uniform(np.log(0.01), np.log(10), size=(20_000, 1)))
        P = rng.gamma(np.broadcast_to(conc, (20_000, K)))
        P = P[P.sum(axis=1) > 0]
        P /= P.sum(axis=1, keepdims=True)
        v = avg_score(P)
        assert v.min() >= (K + 1) / (2 * K) - 1e-12
        assert v.max() <= 1 + 1e-12


@given(st.integers(2, 10), st.integers(0, 2**31))
def test_aps_monotone_in_rank(K, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(K))
    s = aps_scores_all(p)
    order = np.argsort(-p, kind="stable")
    assert np.all(np.diff(s[order]) >= 0)


@given(st.integers(2, 10), st.integers(0, 2**31))
def test_aps_equivariance(K, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(K))
    perm = rng.permutation(K)
    np.testing.assert_allclose(aps_scores_all(p[perm]), aps_scores_all(p)[perm], atol=1e-15)


def test_randomized_scores_need_rng_and_stay_below_deterministic(rng):
    cfg = ScoreConfig(randomized=True)
    P = rng.dirichlet(np.ones(5), size=30)
    with pytest.raises(DomainError):
        class_scores(P, cfg)
    r = class_scores(P, cfg, np.random.default_rng(0))
    d = class_scores(P)
    assert np.all(r <= d) and np.all(r >= d - P - 1e-15)
    again = class_scores(P, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(r, again)


def test_label_scores_pick_columns(rng):
    P = rng.dirichlet(np.ones(6), size=40)
    y = rng.integers(0, 6, size=40)
    np.testing.assert_array_equal(label_scores(P, y), class_scores(P)[np.arange(40), y])
    with pytest.raises(DomainError):
        label_scores(P, y[:-1])


@pytest.mark.parametrize("cfg", [APS, ScoreConfig("raps"), ScoreConfig("aps", randomized=True)])
def test_class_keys_match_class_scores(cfg):
    P = np.random.default_rng(0).dirichlet(np.full(6, 0.4), size=50)
    hi, lo = class_keys(P, cfg, np.random.default_rng(3))
    np.testing.assert_allclose(hi, class_scores(P, cfg, np.random.default_rng(3)), rtol=0, atol=1e-15)
    assert np.all(np.abs(lo) <= np.spacing(np.abs(hi)) / 2)


def test_class_key_examples():
    hi, lo = class_keys([0.5, 0.3, 0.2])
    np.testing.assert_array_equal(hi[0], [0.5, 0.8, 1.0])
    # hi + lo is exactly 1 - (mass ranked after), in rational arithmetic
    tails = [Fraction(0.3) + Fraction(0.2), Fraction(0.2), Fraction(0)]
    assert [Fraction(h) + Fraction(x) for h, x in zip(hi[0], lo[0])] == [1 - t for t in tails]
    hi, lo = class_keys([1.0, 1e-40, 1e-60])
    np.testing.assert_array_equal(hi[0], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(lo[0], [-(1e-40 + 1e-60), -1e-60, 0.0], rtol=1e-15)
    # the tie order follows the exact scores even though hi is saturated
    assert lo[0, 0] < lo[0, 1] < lo[0, 2]
