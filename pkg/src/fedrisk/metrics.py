"""AUC-ROC with DeLong variance for single models and paired differences.

Everything is computed from placement values: for each positive, the share
of negatives scored below it, and for each negative, the share of positives
scored above it (ties count one half in both).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_95 = 1.959963984540054


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError(
            f"AUC needs at least one positive and one negative label "
            f"(got {pos.size} positive, {neg.size} negative)"
        )
    return pos, neg


def placements(scores, labels):
    """Return ``(v10, v01)``: per-positive and per-negative placement values."""
    pos, neg = _split(scores, labels)
    neg_sorted, pos_sorted = np.sort(neg), np.sort(pos)
    below = np.searchsorted(neg_sorted, pos, side="left")
    tied = np.searchsorted(neg_sorted, pos, side="right") - below
    v10 = (below + 0.5 * tied) / neg.size
    above = pos.size - np.searchsorted(pos_sorted, neg, side="right")
    tied = np.searchsorted(pos_sorted, neg, side="right") - np.searchsorted(pos_sorted, neg, side="left")
    v01 = (above + 0.5 * tied) / pos.size
    return v10, v01


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly."""
    pos, neg = _split(scores, labels)
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    at_or_below = np.searchsorted(neg_sorted, pos, side="right")
    # Doubled counts stay integral, so the single division is the only rounding.
    doubled = int(np.sum(below) + np.sum(at_or_below))
    return doubled / (2.0 * pos.size * neg.size)


@dataclass(frozen=True)
class AucEstimate:
    auc: float
    variance: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass(frozen=True)
class AucDiff:
    delta: float
    variance: float
    ci_low: float
    ci_high: float
    auc_a: float
    auc_b: float

    @property
    def significant(self) -> bool:
        return not (self.ci_low <= 0.0 <= self.ci_high)


def _require_variance(v10, v01):
    if v10.size < 2 or v01.size < 2:
        raise ValueError(
            "DeLong variance needs at least two positives and two negatives "
            f"(got {v10.size} positive, {v01.size} negative)"
        )


def delong_estimate(scores, labels) -> AucEstimate:
    v10, v01 = placements(scores, labels)
    _require_variance(v10, v01)
    value = auc(scores, labels)
    variance = float(np.var(v10, ddof=1) / v10.size + np.var(v01, ddof=1) / v01.size)
    half = Z_95 * np.sqrt(variance)
    return AucEstimate(
        auc=value,
        variance=variance,
        ci_low=float(max(0.0, value - half)),
        ci_high=float(min(1.0, value + half)),
        n_pos=int(v10.size),
        n_neg=int(v01.size),
    )


def delong_diff(scores_a, scores_b, labels) -> AucDiff:
    """DeLong comparison of two models scored on the same labelled records.

    The variance of ``auc_a - auc_b`` accounts for the correlation between
    the two models through the paired placement values.
    """
    a = np.asarray(scores_a, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"score vectors differ in length: {a.size} vs {b.size}")
    v10_a, v01_a = placements(a, labels)
    v10_b, v01_b = placements(b, labels)
    _require_variance(v10_a, v01_a)
    auc_a, auc_b = auc(a, labels), auc(b, labels)
    delta = auc_a - auc_b
    # var(A) + var(B) - 2 cov(A, B), written as the variance of paired differences.
    variance = float(
        np.var(v10_a - v10_b, ddof=1) / v10_a.size
        + np.var(v01_a - v01_b, ddof=1) / v01_a.size
    )
    half = Z_95 * np.sqrt(variance)
    return AucDiff(
        delta=delta,
        variance=variance,
        ci_low=float(delta - half),
        ci_high=float(delta + half),
        auc_a=auc_a,
        auc_b=auc_b,
    )


def delong_covariance(scores_a, scores_b, labels) -> float:
    """Covariance term of the two AUC estimates."""
    v10_a, v01_a = placements(scores_a, labels)
    v10_b, v01_b = placements(scores_b, labels)
    _require_variance(v10_a, v01_a)
    return float(
        np.cov(v10_a, v10_b, ddof=1)[0, 1] / v10_a.size
        + np.cov(v01_a, v01_b, ddof=1)[0, 1] / v01_a.size
    )
