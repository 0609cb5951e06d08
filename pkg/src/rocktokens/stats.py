"""Statistical kernels: rank tests, correlation, exact binomial, paired
bootstrap, multiple-testing corrections and the Jaccard index."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import special

from .rng import substream


class UndefinedCorrelationError(ValueError):
    """Raised when either input has zero variance."""


class DegenerateSampleError(ValueError):
    """Raised when a paired test has no non-zero differences."""


class TestResult(NamedTuple):
    statistic: float
    p_value: float


@dataclass(frozen=True)
class BootstrapResult:
    point_estimate: float
    ci_low: float
    ci_high: float
    p_value: float
    resamples: int
    seed: int
    method: str = "percentile"

    def rejects(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


@dataclass(frozen=True)
class CorrectionReport:
    method: str
    threshold_or_level: float
    rejected: frozenset[int]


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def midranks(values) -> np.ndarray:
    """1-based ranks with ties given the mean of the ranks they span."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_sizes(values) -> np.ndarray:
    _, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    return counts


def pearson(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Sample correlation with a two-sided p from Student's t, n - 2 dof."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-d sequences")
    n = len(x)
    if n < 3:
        raise ValueError("pearson needs at least 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance; correlation undefined")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return TestResult(r, 0.0)
    t = r * math.sqrt(df / ((1.0 - r) * (1.0 + r)))
    p = 2.0 * float(special.stdtr(df, -abs(t)))
    return TestResult(r, min(1.0, p))


def _two_sided(lower: float, upper: float) -> float:
    return min(1.0, 2.0 * min(lower, upper))


def mann_whitney(a: Sequence[float], b: Sequence[float], exact_max: int = 10) -> TestResult:
    """U statistic of ``a`` (midranks for ties) and a two-sided p-value.

    Exact permutation p when ``len(a) + len(b) <= exact_max``; otherwise the
    tie-corrected normal approximation with a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("mann_whitney needs two non-empty samples")
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    if n <= exact_max:
        us = np.array(
            [ranks[list(c)].sum() - n1 * (n1 + 1) / 2.0 for c in itertools.combinations(range(n), n1)]
        )
        eps = 1e-9
        lower = float(np.mean(us <= u + eps))
        upper = float(np.mean(us >= u - eps))
        return TestResult(u, _two_sided(lower, upper))
    mu = n1 * n2 / 2.0
    ties = _tie_sizes(pooled)
    tie_term = float(np.sum(ties**3 - ties)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return TestResult(u, 1.0)
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(u, min(1.0, 2.0 * _norm_sf(z)))


def wilcoxon_signed_rank(
    pre: Sequence[float],
    post: Sequence[float],
    alternative: str = "two-sided",
    exact_max: int = 12,
) -> TestResult:
    """Signed-rank statistic W+ of ``pre - post`` with zero differences dropped.

    ``alternative="greater"`` tests pre > post (large W+), ``"less"`` the
    reverse.  Exact enumeration of sign patterns for up to ``exact_max``
    non-zero differences, normal approximation with continuity correction
    beyond that.
    """
    pre = np.asarray(pre, dtype=float)
    post = np.asarray(post, dtype=float)
    if pre.shape != post.shape:
        raise ValueError("wilcoxon_signed_rank needs equal-length samples")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = pre - post
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateSampleError("all differences are zero")
    ranks = midranks(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= exact_max:
        signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
        ws = signs @ ranks
        eps = 1e-9
        upper = float(np.mean(ws >= w - eps))
        lower = float(np.mean(ws <= w + eps))
    else:
        mu = n * (n + 1) / 4.0
        ties = _tie_sizes(np.abs(d))
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties**3 - ties)) / 48.0
        sd = math.sqrt(var)
        upper = _norm_sf((w - mu - 0.5) / sd)
        lower = _norm_sf((mu - w - 0.5) / sd)
    if alternative == "greater":
        return TestResult(w, min(1.0, upper))
    if alternative == "less":
        return TestResult(w, min(1.0, lower))
    return TestResult(w, _two_sided(lower, upper))


def binomial_two_sided(k: int, n: int, p0: float = 0.5) -> float:
    """Equal-tail doubled exact binomial p: min(1, 2 min(P[X<=k], P[X>=k])).

    Tail sums are evaluated in exact rational arithmetic and rounded once.
    """
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    if not 0.0 < p0 < 1.0:
        raise ValueError("p0 must lie in (0, 1)")
    p = Fraction(p0)
    q = 1 - p
    pmf = [math.comb(n, i) * p**i * q ** (n - i) for i in range(n + 1)]
    lower = sum(pmf[: k + 1], Fraction(0))
    upper = sum(pmf[k:], Fraction(0))
    return float(min(Fraction(1), 2 * min(lower, upper)))


def paired_bootstrap(
    baseline: Sequence[int],
    treated: Sequence[int],
    resamples: int = 10_000,
    seed: int = 0,
    alpha: float = 0.05,
) -> BootstrapResult:
    """Paired percentile bootstrap for the difference of two binary means.

    Problems are resampled with replacement.  With binary indicators a
    resample is fully described by how many of each (baseline, treated)
    cell it draws, so the draw is done as a multinomial over the four cells;
    this is the same distribution as index resampling at O(resamples) cost.
    The p-value is the doubled smaller tail of the resampled deltas around
    zero, floored at ``2 / resamples``.
    """
    b = np.asarray(baseline)
    t = np.asarray(treated)
    if b.shape != t.shape or b.ndim != 1:
        raise ValueError("baseline and treated must be equal-length sequences")
    n = len(b)
    if n == 0:
        raise ValueError("need at least one paired observation")
    if not (np.isin(b, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise ValueError("indicators must be 0/1")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    b = b.astype(np.int64)
    t = t.astype(np.int64)
    point = float(t.mean() - b.mean())
    cells = np.bincount(2 * b + t, minlength=4)  # 00, 01, 10, 11
    rng = substream(seed, "paired_bootstrap")
    draws = rng.multinomial(n, cells / n, size=resamples)
    deltas = (draws[:, 1] - draws[:, 2]) / n
    lo, hi = np.percentile(deltas, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    p = 2.0 * min(float(np.mean(deltas <= 0)), float(np.mean(deltas >= 0)))
    p = min(1.0, max(2.0 / resamples, p))
    return BootstrapResult(
        point_estimate=point,
        ci_low=float(min(lo, point)),
        ci_high=float(max(hi, point)),
        p_value=p,
        resamples=resamples,
        seed=seed,
    )


def bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> CorrectionReport:
    p = np.asarray(p_values, dtype=float)
    m = len(p)
    threshold = alpha / m if m else alpha
    rejected = frozenset(int(i) for i in np.flatnonzero(p < threshold))
    return CorrectionReport("bonferroni", threshold, rejected)


def benjamini_hochberg(p_values: Sequence[float], q: float = 0.05) -> CorrectionReport:
    """Step-up rule: reject the k smallest p where k is the largest rank
    with p_(k) <= k q / m."""
    p = np.asarray(p_values, dtype=float)
    m = len(p)
    if m == 0:
        return CorrectionReport("benjamini_hochberg", q, frozenset())
    order = np.argsort(p, kind="mergesort")
    passing = np.flatnonzero(p[order] <= np.arange(1, m + 1) * q / m)
    if passing.size == 0:
        return CorrectionReport("benjamini_hochberg", q, frozenset())
    k = int(passing[-1]) + 1
    return CorrectionReport("benjamini_hochberg", q, frozenset(int(i) for i in order[:k]))
