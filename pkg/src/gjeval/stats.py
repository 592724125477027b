"""Hypothesis tests for comparing classifiers, plus the special functions
they need.

Implemented tests
-----------------
* McNemar-Bowker symmetry test on the 3x3 cross-table of two sets of hard
  predictions. Off-diagonal pairs with zero disagreements in both directions
  contribute no information; by default they are dropped and the degrees of
  freedom reduced accordingly (``all_pairs=True`` keeps the textbook df of 3).
* DeLong's test for correlated AUCs, via midranks and the structural
  components of the Mann-Whitney statistic (the fast O(n log n) form).
* A kappa consistency z-test using the null-hypothesis standard error; the
  large-sample (non-null) standard error is also reported for interval use.

The normal CDF is computed from the complementary error function, and the
chi-square survival function from the regularized upper incomplete gamma
function (series expansion below a + 1, continued fraction above), so there
is no runtime dependency on a stats library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TestResult",
    "PairedPredictions",
    "DeLongCov",
    "std_normal_cdf",
    "chi2_sf",
    "midranks",
    "delong_auc_variance",
    "delong_auc_cov",
    "delong_test",
    "bowker_test",
    "kappa_test",
    "bootstrap_auc_variance",
]

_SQRT2 = math.sqrt(2.0)
_MAX_ITER = 500
_EPS = 1e-16
_DEGENERATE_VAR = 1e-15


@dataclass(frozen=True)
class TestResult:
    """Outcome of one hypothesis test.

    ``df`` is present only for chi-square based tests. ``detail`` carries
    test-specific numbers (AUCs, variances, kappa, standard errors, flags).
    """

    name: str
    statistic: float
    p_value: float
    df: int | None = None
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"name": self.name, "statistic": self.statistic}
        if self.df is not None:
            out["df"] = self.df
        out["p"] = self.p_value
        if self.detail:
            out["detail"] = {
                k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in self.detail.items()
            }
        return out


@dataclass(frozen=True)
class PairedPredictions:
    """Hard predictions from two classifiers on the same records."""

    truths: tuple[int, ...]
    preds_a: tuple[int, ...]
    preds_b: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.truths) == len(self.preds_a) == len(self.preds_b)):
            raise ValueError("paired predictions must have equal lengths")
        if len(self.truths) == 0:
            raise ValueError("paired predictions must be non-empty")
        for seq in (self.truths, self.preds_a, self.preds_b):
            if any(v not in (0, 1, 2) for v in seq):
                raise ValueError("labels must be in {0, 1, 2}")


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function.

    The erfc form keeps full relative accuracy deep in the lower tail,
    which is what two-sided p-values ultimately depend on. The symmetry
    Phi(x) + Phi(-x) == 1 holds to within one ulp.
    """
    return 0.5 * math.erfc(-x / _SQRT2)


def _gamma_p_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by series, for x < a + 1."""
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by modified Lentz continued
    fraction, for x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function P(X >= x) with ``df`` degrees of freedom.

    Equals the regularized upper incomplete gamma Q(df/2, x/2). For df = 2
    this reduces analytically to exp(-x/2).
    """
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    if not math.isfinite(x) or x < 0:
        raise ValueError(f"x must be finite and non-negative, got {x!r}")
    if x == 0.0:
        return 1.0
    a = df / 2.0
    t = x / 2.0
    if t < a + 1.0:
        return 1.0 - _gamma_p_series(a, t)
    return _gamma_q_contfrac(a, t)


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("values must be a non-empty 1-D sequence")
    order = np.argsort(v, kind="stable")
    sv = v[order]
    n = v.size
    starts = np.flatnonzero(np.concatenate(([True], sv[1:] != sv[:-1])))
    ends = np.append(starts[1:], n)
    avg = (starts + 1 + ends) / 2.0  # mean of integer ranks start+1 .. end
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


@dataclass(frozen=True)
class DeLongCov:
    """AUCs of two score vectors plus their DeLong (co)variances."""

    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    cov: float


def _structural_components(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC and the per-observation structural components V10 (positives) and
    V01 (negatives) of the Mann-Whitney statistic with half credit for ties."""
    m, n = x.size, y.size
    tz = midranks(np.concatenate([x, y]))
    tx = midranks(x)
    ty = midranks(y)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    auc = (tz[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    return auc, v10, v01


def delong_auc_variance(scores, labels) -> tuple[float, float]:
    """(AUC, DeLong variance) for a single score vector.

    Variance is var(V10)/m + var(V01)/n over the structural components,
    with sample variances (ddof=1). Requires >= 2 positives and negatives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or y.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    pos = y == 1
    m = int(pos.sum())
    n = int(y.size - m)
    if m < 2 or n < 2:
        raise ValueError(f"need >= 2 positives and >= 2 negatives, got {m} and {n}")
    auc, v10, v01 = _structural_components(s[pos], s[~pos])
    var = float(np.var(v10, ddof=1)) / m + float(np.var(v01, ddof=1)) / n
    return float(auc), var


def delong_auc_cov(scores_a, scores_b, labels) -> DeLongCov:
    """DeLong variance/covariance estimate for two correlated AUCs.

    Both score vectors must be evaluated on the same records; ``labels`` are
    the shared binary ground-truth indicators. Requires at least two
    positives and two negatives (sample covariances use ddof=1).
    """
    sa = np.asarray(scores_a, dtype=np.float64)
    sb = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if sa.shape != y.shape or sb.shape != y.shape or y.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    if not (np.all(np.isfinite(sa)) and np.all(np.isfinite(sb))):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    pos = y == 1
    m = int(pos.sum())
    n = int(y.size - m)
    if m < 2 or n < 2:
        raise ValueError(f"need >= 2 positives and >= 2 negatives, got {m} and {n}")
    aucs = []
    v10 = np.empty((2, m))
    v01 = np.empty((2, n))
    for r, s in enumerate((sa, sb)):
        auc, v10[r], v01[r] = _structural_components(s[pos], s[~pos])
        aucs.append(auc)
    s10 = np.cov(v10, ddof=1)
    s01 = np.cov(v01, ddof=1)
    s = s10 / m + s01 / n
    return DeLongCov(
        auc_a=float(aucs[0]),
        auc_b=float(aucs[1]),
        var_a=float(s[0, 0]),
        var_b=float(s[1, 1]),
        cov=float(s[0, 1]),
    )


def delong_test(scores_a, scores_b, labels) -> TestResult:
    """Two-sided DeLong z-test for equality of two correlated AUCs.

    When the variance of the difference collapses below 1e-15 (typically
    identical or perfectly separable scores) the comparison is flagged
    degenerate and reported as z = 0, p = 1 rather than dividing by ~0.
    """
    cov = delong_auc_cov(scores_a, scores_b, labels)
    var_diff = cov.var_a + cov.var_b - 2.0 * cov.cov
    detail = {
        "auc_a": cov.auc_a,
        "auc_b": cov.auc_b,
        "var_a": cov.var_a,
        "var_b": cov.var_b,
        "cov": cov.cov,
        "degenerate": False,
    }
    if var_diff < _DEGENERATE_VAR:
        detail["degenerate"] = True
        return TestResult(name="delong", statistic=0.0, p_value=1.0, detail=detail)
    z = (cov.auc_a - cov.auc_b) / math.sqrt(var_diff)
    p = 2.0 * std_normal_cdf(-abs(z))
    return TestResult(name="delong", statistic=z, p_value=p, detail=detail)


def delong_test_micro(probs_a, probs_b, truths) -> TestResult:
    """DeLong test on micro-flattened one-vs-rest pairs. Experimental.

    Each record contributes three (score, indicator) pairs, one per class.
    Flattening duplicates every record across classes, which induces
    correlation the DeLong variance ignores, so the p-value is approximate;
    the result is flagged experimental. Prefer per-class tests.
    """
    pa = np.asarray(probs_a, dtype=np.float64)
    pb = np.asarray(probs_b, dtype=np.float64)
    t = np.asarray(truths, dtype=np.int64)
    if pa.shape != pb.shape or pa.ndim != 2 or pa.shape[1] != 3 or pa.shape[0] != t.size:
        raise ValueError("probs must be (n, 3) matrices aligned with truths")
    onehot = np.zeros_like(pa)
    onehot[np.arange(t.size), t] = 1.0
    res = delong_test(pa.reshape(-1), pb.reshape(-1), onehot.reshape(-1))
    detail = dict(res.detail)
    detail["experimental"] = True
    return TestResult(name="delong_micro", statistic=res.statistic, p_value=res.p_value, detail=detail)


def _cross_table(a: Sequence[int], b: Sequence[int]) -> np.ndarray:
    t = np.zeros((3, 3), dtype=np.float64)
    np.add.at(t, (np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)), 1.0)
    return t


def bowker_test(
    pairs: PairedPredictions | Sequence[tuple[int, int]], all_pairs: bool = False
) -> TestResult:
    """McNemar-Bowker test of symmetry on the cross-table of two prediction sets.

    ``pairs`` is either a :class:`PairedPredictions` or a plain sequence of
    (pred_a, pred_b) label pairs. statistic = sum over class pairs (i, j),
    i < j, of (T[i,j] - T[j,i])^2 / (T[i,j] + T[j,i]). Pairs with
    T[i,j] + T[j,i] == 0 are dropped and df reduced, unless ``all_pairs``
    keeps df = 3 (the zero-sum pairs still contribute 0 to the statistic).
    A table with no informative pairs returns statistic 0, p = 1.
    """
    if isinstance(pairs, PairedPredictions):
        a_labels, b_labels = pairs.preds_a, pairs.preds_b
    else:
        seq = list(pairs)
        if not seq:
            raise ValueError("bowker_test requires at least one pair")
        a_labels = [p[0] for p in seq]
        b_labels = [p[1] for p in seq]
    t = _cross_table(a_labels, b_labels)
    stat = 0.0
    df = 0
    dropped = 0
    for i in range(3):
        for j in range(i + 1, 3):
            s = t[i, j] + t[j, i]
            if s > 0:
                stat += (t[i, j] - t[j, i]) ** 2 / s
                df += 1
            else:
                dropped += 1
    if all_pairs:
        df = 3
    detail = {"dropped_pairs": dropped, "all_pairs": all_pairs}
    if df == 0:
        return TestResult(name="bowker", statistic=0.0, p_value=1.0, df=0, detail=detail)
    return TestResult(name="bowker", statistic=stat, p_value=chi2_sf(stat, df), df=df, detail=detail)


def kappa_test(labels_a: Sequence[int], labels_b: Sequence[int]) -> TestResult:
    """z-test of Cohen's kappa against zero agreement beyond chance.

    The statistic is kappa / SE0 where SE0 is the standard error under the
    null (kappa = 0). The large-sample non-null standard error is included
    in the detail payload for confidence-interval construction. When both
    raters use a single shared category the test is degenerate: kappa is 1
    by convention if the ratings are identical, NaN otherwise.
    """
    a = np.asarray(labels_a, dtype=np.int64)
    b = np.asarray(labels_b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("label vectors must be 1-D, non-empty, equal length")
    t = _cross_table(a, b)
    n = float(t.sum())
    p = t / n
    p_o = float(np.trace(p))
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    p_e = float(np.dot(row, col))
    detail: dict = {"p_o": p_o, "p_e": p_e, "n": n, "degenerate": False}
    if 1.0 - p_e < _DEGENERATE_VAR:
        kappa = 1.0 if p_o >= 1.0 - 1e-12 else float("nan")
        detail.update(kappa=kappa, degenerate=True)
        return TestResult(name="kappa", statistic=0.0, p_value=1.0, detail=detail)
    kappa = (p_o - p_e) / (1.0 - p_e)
    # Null-hypothesis variance (Fleiss): the z statistic tests kappa = 0.
    var0_num = p_e + p_e**2 - float(np.sum(row * col * (row + col)))
    se0 = math.sqrt(max(0.0, var0_num)) / ((1.0 - p_e) * math.sqrt(n))
    # Large-sample non-null variance (Fleiss-Cohen-Everitt form).
    term1 = 0.0
    for i in range(3):
        term1 += p[i, i] * ((1.0 - p_e) - (row[i] + col[i]) * (1.0 - p_o)) ** 2
    term2 = 0.0
    for i in range(3):
        for j in range(3):
            if i != j:
                term2 += p[i, j] * (col[i] + row[j]) ** 2
    term2 *= (1.0 - p_o) ** 2
    term3 = (p_o * p_e - 2.0 * p_e + p_o) ** 2
    var_full = (term1 + term2 - term3) / (n * (1.0 - p_e) ** 4)
    se_full = math.sqrt(max(0.0, var_full))
    detail.update(kappa=kappa, se0=se0, se=se_full)
    if se0 == 0.0:
        detail["degenerate"] = True
        return TestResult(name="kappa", statistic=0.0, p_value=1.0, detail=detail)
    z = kappa / se0
    return TestResult(name="kappa", statistic=z, p_value=2.0 * std_normal_cdf(-abs(z)), detail=detail)


def _auc_from_ranks(scores: np.ndarray, pos_mask: np.ndarray) -> float:
    m = int(pos_mask.sum())
    n = scores.size - m
    ranks = midranks(scores)
    return (ranks[pos_mask].sum() - m * (m + 1) / 2.0) / (m * n)


def bootstrap_auc_variance(scores, labels, n_boot: int = 10000, seed: int = 0) -> float:
    """Nonparametric bootstrap variance of a single AUC.

    Each replicate gets its own child seed spawned from the root seed, so the
    result does not depend on execution order or worker count. Replicates
    that lose one of the classes are redrawn.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = s.size
    children = np.random.SeedSequence(seed).spawn(n_boot)
    aucs = np.empty(n_boot)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        while True:
            idx = rng.integers(0, n, n)
            ys = y[idx]
            mp = int(ys.sum())
            if 0 < mp < n:
                break
        aucs[i] = _auc_from_ranks(s[idx], ys == 1)
    return float(np.var(aucs, ddof=1))
