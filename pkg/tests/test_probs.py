import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special, stats

from ec3.errors import DomainError
from ec3.probs import Dataset, as_simplex, entropy, log_probs, softmax_with_temperature, sort_desc


def simplex_points(min_k=2, max_k=12):
    def build(w):
        w = np.asarray(w)
        return w / w.sum()

    return st.integers(min_k, max_k).flatmap(
        lambda k: arrays(np.float64, k, elements=st.floats(1e-6, 1.0)).map(build)
    )


def test_entropy_examples():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.039721, abs=1e-6)


def test_entropy_matches_scipy(rng):
    P = rng.dirichlet(np.full(7, 0.3), size=200)
    np.testing.assert_allclose(entropy(P), stats.entropy(P, axis=1), rtol=1e-12, atol=1e-14)


@given(simplex_points())
def test_entropy_at_most_log_k(p):
    assert 0.0 <= entropy(p) <= math.log(p.size) + 1e-9


def test_entropy_max_only_at_uniform():
    K = 5
    assert entropy(np.full(K, 1 / K)) == pytest.approx(math.log(K), abs=1e-12)
    p = np.full(K, 1 / K)
    p[0] += 1e-3
    p[1] -= 1e-3
    assert entropy(p) < math.log(K) - 1e-9


def test_simplex_rejects_and_renormalizes():
    with pytest.raises(DomainError):
        as_simplex([0.5, 0.6])
    with pytest.raises(DomainError):
        as_simplex([1.0])
    with pytest.raises(DomainError):
        as_simplex([np.nan, 1.0])
    with pytest.raises(DomainError):
        as_simplex([-0.1, 1.1])
    fixed = as_simplex([0.6, 0.399999])
    assert fixed.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DomainError):
        as_simplex([0.6, 0.399999], renormalize=False)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_with_temperature([0.0, 0.0], 1.0), [0.5, 0.5])
    np.testing.assert_allclose(softmax_with_temperature([2.0, 0.0], 1.0), [0.880797, 0.119203], atol=1e-6)
    np.testing.assert_allclose(softmax_with_temperature([2.0, 0.0], 1000.0), [0.5, 0.5], atol=1e-3)


def test_softmax_matches_scipy(rng):
    z = rng.normal(size=(50, 6)) * 5
    for T in (0.1, 1.0, 7.0):
        np.testing.assert_allclose(softmax_with_temperature(z, T), special.softmax(z / T, axis=1), rtol=1e-12)


def test_softmax_is_stable_for_huge_logits():
    p = softmax_with_temperature([1000.0, 0.0, -1000.0], 1.0)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_softmax_bad_temperature(T):
    with pytest.raises(DomainError):
        softmax_with_temperature([1.0, 2.0], T)


def test_softmax_non_finite_logit():
    with pytest.raises(DomainError):
        softmax_with_temperature([1.0, np.inf], 1.0)


def _untied(z):
    top = np.sort(z)[::-1]
    return top[0] - top[1] > 1e-6


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)).filter(_untied))
def test_tempered_entropy_monotone_and_argmax_fixed(z):
    grid = np.geomspace(0.05, 20, 60)
    H = [entropy(softmax_with_temperature(z, T)) for T in grid]
    assert all(b >= a - 1e-9 for a, b in zip(H, H[1:]))
    top = int(np.argmax(z))
    assert all(int(np.argmax(softmax_with_temperature(z, T))) == top for T in grid)


def test_sort_desc_examples():
    s = sort_desc([0.2, 0.5, 0.3])
    np.testing.assert_array_equal(s.sorted, [0.5, 0.3, 0.2])
    assert s.rank_of[1] == 0
    t = sort_desc([0.25, 0.25, 0.5])
    assert (t.rank_of[0], t.rank_of[1]) == (1, 2)


def test_sort_desc_matches_reference_sort(rng):
    p = rng.dirichlet(np.ones(100))
    p[[3, 40, 77]] = p[3]  # force ties
    p /= p.sum()
    ref = sorted(range(100), key=lambda k: (-p[k], k))
    s = sort_desc(p)
    np.testing.assert_array_equal(s.order, ref)
    np.testing.assert_array_equal(s.sorted, p[ref])


@given(simplex_points())
def test_sort_round_trip_and_idempotence(p):
    s = sort_desc(p)
    assert np.all(np.diff(s.sorted) <= 0)
    np.testing.assert_array_equal(s.order[s.rank_of], np.arange(p.size))
    np.testing.assert_array_equal(s.rank_of[s.order], np.arange(p.size))
    again = sort_desc(s.sorted)
    np.testing.assert_array_equal(again.sorted, s.sorted)
    np.testing.assert_array_equal(again.order, np.arange(p.size))


def test_log_probs_clamps_zero():
    assert log_probs([1.0, 0.0])[1] == pytest.approx(math.log(1e-12))


def test_dataset_validation_and_immutability():
    probs = np.array([[0.6, 0.4], [0.5, 0.5], [0.1, 0.9]])
    d = Dataset(probs, [0, 1, 1])
    assert (d.n, d.K, len(d)) == (3, 2, 3)
    assert probs.flags.writeable  # caller's array untouched
    with pytest.raises(ValueError):
        d.probs[0, 0] = 1.0
    sample = d[2]
    assert sample.label == 1 and sample.probs[1] == 0.9
    with pytest.raises(DomainError):
        Dataset(probs, [0, 1, 2])
    with pytest.raises(DomainError):
        Dataset(probs, [0, 1])
    with pytest.raises(DomainError):
        Dataset(probs, [0, 1, 1], oracle=np.ones((2, 2)) / 2)
    sub = d.subset([2, 0])
    np.testing.assert_array_equal(sub.labels, [1, 0])
