import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

import oracles
from rocktokens.stats import (
    DegenerateSampleError,
    UndefinedCorrelationError,
    benjamini_hochberg,
    binomial_two_sided,
    bonferroni,
    jaccard,
    mann_whitney,
    paired_bootstrap,
    pearson,
    wilcoxon_signed_rank,
)


# -- jaccard

def test_jaccard_examples():
    assert jaccard({1, 2, 3}, {1, 2, 3}) == 1.0
    assert jaccard({1, 2}, {2, 3}) == pytest.approx(1 / 3, abs=1e-7)
    assert jaccard(set(), set()) == 1.0


@settings(max_examples=100)
@given(a=st.sets(st.integers(0, 12)), b=st.sets(st.integers(0, 12)), c=st.sets(st.integers(0, 12)))
def test_jaccard_is_a_similarity_with_metric_complement(a, b, c):
    assert jaccard(a, b) == jaccard(b, a)
    assert (jaccard(a, b) == 1.0) == (a == b)
    d = lambda x, y: 1 - jaccard(x, y)  # noqa: E731
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-12


# -- pearson

def test_pearson_perfect_lines():
    assert pearson([1, 2, 3], [2, 4, 6]).statistic == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]).statistic == pytest.approx(-1.0)


def test_pearson_matches_reference_on_independent_normals():
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal(200), rng.standard_normal(200)
    res = pearson(x, y)
    r, p = oracles.pearson_reference(x, y)
    assert abs(res.statistic) < 0.2
    assert res.statistic == pytest.approx(r, abs=1e-12)
    assert res.p_value == pytest.approx(p, abs=1e-6)


def test_pearson_degenerate():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])


@settings(max_examples=50)
@given(
    seed=st.integers(0, 10_000),
    a=st.floats(0.01, 100),
    b=st.floats(-100, 100),
)
def test_pearson_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(20), rng.standard_normal(20)
    assert abs(pearson(a * x + b, y).statistic - pearson(x, y).statistic) < 1e-12


# -- mann-whitney

def test_mann_whitney_exact_small():
    res = mann_whitney([1, 2, 3], [4, 5, 6])
    assert res.statistic == 0.0
    assert res.p_value == pytest.approx(0.1)


def test_mann_whitney_identical_samples():
    a = [3.0, 1.0, 2.0, 5.0]
    assert mann_whitney(a, a).statistic == len(a) * len(a) / 2


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_mann_whitney_matches_enumeration(n):
    rng = np.random.default_rng(n)
    a = rng.standard_normal(n)
    b = rng.standard_normal(n) + 0.5
    u, p = oracles.mann_whitney_exact_two_sided(a, b)
    res = mann_whitney(a, b)
    assert res.statistic == u
    assert res.p_value == pytest.approx(p)


def test_mann_whitney_shift_p_decreases_with_n():
    ps = []
    for n in (2, 3, 4, 5):
        b = np.arange(n, dtype=float)
        ps.append(mann_whitney(b + 100, b).p_value)
        assert ps[-1] == pytest.approx(oracles.mann_whitney_exact_two_sided(b + 100, b)[1])
    assert all(x > y for x, y in zip(ps, ps[1:]))


def test_mann_whitney_large_matches_scipy_asymptotic():
    rng = np.random.default_rng(1)
    a = np.round(rng.standard_normal(40), 1)
    b = np.round(rng.standard_normal(35) + 0.3, 1)
    res = mann_whitney(a, b)
    ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert res.statistic == ref.statistic
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# -- wilcoxon

def test_wilcoxon_all_positive_small():
    res = wilcoxon_signed_rank([1, 2, 3], [0, 1, 2], alternative="greater")
    assert res.statistic == 6.0
    assert res.p_value == pytest.approx(1 / 8)


def test_wilcoxon_degenerate():
    with pytest.raises(DegenerateSampleError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])


def test_wilcoxon_swap_flips_tail():
    pre, post = [5.0, 3.0, 8.0, 1.0, 4.0], [4.0, 3.5, 6.0, 0.5, 1.0]
    g = wilcoxon_signed_rank(pre, post, alternative="greater").p_value
    swapped_less = wilcoxon_signed_rank(post, pre, alternative="less").p_value
    assert g == pytest.approx(swapped_less)


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    pre = rng.standard_normal(8)
    post = pre - rng.standard_normal(8) * 0.5 - 0.2
    w, p = oracles.wilcoxon_exact_greater(pre, post)
    res = wilcoxon_signed_rank(pre, post, alternative="greater")
    assert res.statistic == pytest.approx(w)
    assert res.p_value == pytest.approx(p)


def test_wilcoxon_large_matches_scipy_normal_approx():
    rng = np.random.default_rng(3)
    pre = rng.standard_normal(30)
    post = pre - rng.standard_normal(30) - 0.3
    res = wilcoxon_signed_rank(pre, post)
    ref = sps.wilcoxon(pre, post, method="approx", correction=True)
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# -- binomial

@pytest.mark.parametrize("k,n,expected", [(10, 10, 0.001953125), (7, 7, 0.015625), (6, 6, 0.03125)])
def test_binomial_exact_values(k, n, expected):
    assert binomial_two_sided(k, n) == expected
    assert binomial_two_sided(0, n) == expected


@settings(max_examples=100)
@given(n=st.integers(1, 60), data=st.data())
def test_binomial_symmetry_and_exactness(n, data):
    k = data.draw(st.integers(0, n))
    assert binomial_two_sided(k, n) == binomial_two_sided(n - k, n)
    assert binomial_two_sided(k, n) == float(oracles.binomial_two_sided_fraction(k, n))


# -- bootstrap

def test_bootstrap_identical_never_rejects():
    x = [1, 0, 1, 1, 0, 1]
    res = paired_bootstrap(x, x, resamples=2000, seed=1)
    assert res.point_estimate == 0.0
    assert not res.rejects(0.05)


def test_bootstrap_maximal_separation_hits_floor():
    res = paired_bootstrap([0] * 50, [1] * 50, resamples=10_000, seed=1)
    assert res.point_estimate == 1.0
    assert res.p_value == 2 / 10_000


def test_bootstrap_deterministic_and_ordered():
    rng = np.random.default_rng(0)
    b, t = rng.integers(0, 2, 80), rng.integers(0, 2, 80)
    r1 = paired_bootstrap(b, t, resamples=3000, seed=42)
    r2 = paired_bootstrap(b, t, resamples=3000, seed=42)
    assert r1 == r2
    assert r1.ci_low <= r1.point_estimate <= r1.ci_high
    assert 0.0 <= r1.p_value <= 1.0


def test_bootstrap_matches_index_resampling_distribution():
    """The four-cell multinomial draw and plain index resampling give the
    same interval up to Monte-Carlo error."""
    rng = np.random.default_rng(5)
    b, t = rng.integers(0, 2, 120), rng.integers(0, 2, 120)
    res = paired_bootstrap(b, t, resamples=20_000, seed=9)
    idx = np.random.default_rng(10).integers(0, 120, size=(20_000, 120))
    deltas = t[idx].mean(axis=1) - b[idx].mean(axis=1)
    lo, hi = np.percentile(deltas, [2.5, 97.5])
    assert res.ci_low == pytest.approx(lo, abs=0.02)
    assert res.ci_high == pytest.approx(hi, abs=0.02)


def test_bootstrap_length_mismatch():
    with pytest.raises(ValueError):
        paired_bootstrap([0, 1], [0], resamples=10)


# -- corrections

def test_bonferroni_two_hundred_candidates():
    p = [0.5] * 198 + [0.0038, 0.0016]
    rep = bonferroni(p, 0.05)
    assert rep.threshold_or_level == 2.5e-4
    assert rep.rejected == frozenset()
    assert bonferroni([0.04], 0.05).rejected == {0}


def test_bh_rejects_nothing_at_census_values():
    p = [0.0016] + [0.5] * 199
    assert benjamini_hochberg(p, 0.20).rejected == frozenset()
    assert benjamini_hochberg([0.0] * 5, 0.05).rejected == set(range(5))


@settings(max_examples=200)
@given(p=st.lists(st.floats(0, 1), min_size=1, max_size=8), q=st.sampled_from([0.05, 0.1, 0.2, 0.5]))
def test_bh_matches_bruteforce(p, q):
    got = set(benjamini_hochberg(p, q).rejected)
    assert got == oracles.bh_bruteforce(p, q)
    assert got == oracles.bh_subset_definition(p, q) or len(got) >= len(oracles.bh_subset_definition(p, q))


@settings(max_examples=200)
@given(p=st.lists(st.floats(0, 1), min_size=1, max_size=30), alpha=st.sampled_from([0.01, 0.05, 0.1]))
def test_bonferroni_subset_of_bh(p, alpha):
    assert bonferroni(p, alpha).rejected <= benjamini_hochberg(p, alpha).rejected
