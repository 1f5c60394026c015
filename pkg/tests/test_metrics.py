import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrisk.metrics import (
    Z_95,
    auc,
    delong_covariance,
    delong_diff,
    delong_estimate,
    placements,
)
from oracles import auc_by_pairs, delong_by_loops

HAND_SCORES = [0.8, 0.3, 0.5, 0.1]
HAND_LABELS = [1, 1, 0, 0]


def random_scored_set(rng):
    n = int(rng.integers(4, 51))
    labels = np.zeros(n, dtype=int)
    n_pos = int(rng.integers(2, n - 1))
    labels[rng.choice(n, n_pos, replace=False)] = 1
    # a coarse grid forces plenty of ties
    scores = rng.integers(0, int(rng.integers(2, 12)), size=n) / 10.0
    return scores, labels


def test_auc_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        scores, labels = random_scored_set(rng)
        assert auc(scores, labels) == auc_by_pairs(scores, labels)


def test_delong_matches_looped_placements():
    rng = np.random.default_rng(1)
    for _ in range(50):
        scores, labels = random_scored_set(rng)
        ref_auc, ref_var, ref_v10, ref_v01 = delong_by_loops(scores, labels)
        v10, v01 = placements(scores, labels)
        np.testing.assert_allclose(v10, ref_v10, atol=1e-15)
        np.testing.assert_allclose(v01, ref_v01, atol=1e-15)
        est = delong_estimate(scores, labels)
        assert est.auc == pytest.approx(ref_auc, abs=1e-15)
        assert est.variance == pytest.approx(ref_var, rel=1e-12, abs=1e-15)
        assert np.mean(v10) == pytest.approx(est.auc, abs=1e-15)
        assert np.mean(v01) == pytest.approx(est.auc, abs=1e-15)


def test_hand_case():
    assert auc(HAND_SCORES, HAND_LABELS) == 0.75
    est = delong_estimate(HAND_SCORES, HAND_LABELS)
    assert est.auc == 0.75
    assert est.variance == pytest.approx(0.125, abs=1e-15)
    half = Z_95 * np.sqrt(0.125)
    assert est.ci_low == max(0.0, 0.75 - half)
    assert est.ci_high == min(1.0, 0.75 + half)
    v10, v01 = placements(HAND_SCORES, HAND_LABELS)
    assert v10.tolist() == [1.0, 0.5] and v01.tolist() == [0.5, 1.0]


def test_perfect_separation():
    est = delong_estimate([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert est.auc == 1.0 and est.variance == 0.0
    assert est.ci_low == est.ci_high == 1.0


def test_all_tied_scores():
    assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    for _ in range(30):
        scores, labels = random_scored_set(rng)
        other = rng.random(scores.size)
        base = delong_diff(scores, other, labels)
        moved = delong_diff(np.exp(3 * scores) - 7, other, labels)
        assert moved == base


def test_self_difference_is_exactly_zero():
    rng = np.random.default_rng(3)
    for _ in range(20):
        scores, labels = random_scored_set(rng)
        d = delong_diff(scores, scores, labels)
        assert d.delta == 0.0 and d.variance == 0.0
        assert (d.ci_low, d.ci_high) == (0.0, 0.0)
        assert not d.significant


def test_diff_antisymmetry():
    rng = np.random.default_rng(4)
    for _ in range(20):
        scores, labels = random_scored_set(rng)
        other = rng.random(scores.size)
        ab, ba = delong_diff(scores, other, labels), delong_diff(other, scores, labels)
        assert ab.delta == -ba.delta
        assert ab.variance == pytest.approx(ba.variance, rel=1e-12)
        assert ab.ci_low == pytest.approx(-ba.ci_high, abs=1e-15)
        assert ab.significant == ba.significant


def test_diff_variance_decomposition():
    rng = np.random.default_rng(5)
    for _ in range(20):
        scores, labels = random_scored_set(rng)
        other = scores + rng.normal(0, 0.2, scores.size)
        d = delong_diff(scores, other, labels)
        var_a = delong_by_loops(scores, labels)[1]
        var_b = delong_by_loops(other, labels)[1]
        cov = delong_covariance(scores, other, labels)
        assert d.variance == pytest.approx(var_a + var_b - 2 * cov, rel=1e-9, abs=1e-14)
        assert d.delta == pytest.approx(d.auc_a - d.auc_b, abs=0)


def test_independent_models_have_small_covariance():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 2, 20_000)
    a = rng.random(labels.size) + 0.3 * labels
    b = rng.random(labels.size) + 0.3 * labels
    cov = delong_covariance(a, b, labels)
    var_a = delong_estimate(a, labels).variance
    assert abs(cov) < 0.1 * var_a


def test_significance_follows_ci():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 2, 2000)
    good = labels + rng.normal(0, 0.5, labels.size)
    bad = rng.random(labels.size)
    d = delong_diff(good, bad, labels)
    assert d.significant and d.ci_low > 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=4, max_size=40))
def test_property_auc_bounds_and_complement(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.sum() < 1 or labels.sum() == labels.size:
        return
    value = auc(scores, labels)
    assert 0.0 <= value <= 1.0
    assert auc(-scores, labels) == pytest.approx(1.0 - value, abs=1e-15)
    assert value == auc_by_pairs(scores, labels)


@pytest.mark.parametrize("scores,labels", [
    ([0.1, 0.2], [1, 1]),
    ([0.1, 0.2], [0, 0]),
    ([0.1, 0.2, 0.3], [0, 1]),
    ([0.1, float("nan")], [0, 1]),
    ([0.1, 0.2], [0, 2]),
])
def test_degenerate_inputs_raise(scores, labels):
    with pytest.raises(ValueError):
        auc(scores, labels)


def test_variance_needs_two_per_class():
    assert auc([0.1, 0.9, 0.2], [0, 1, 0]) == 1.0
    with pytest.raises(ValueError):
        delong_estimate([0.1, 0.9, 0.2], [0, 1, 0])
    with pytest.raises(ValueError):
        delong_diff([0.1, 0.2], [0.1, 0.2, 0.3], [0, 1])
