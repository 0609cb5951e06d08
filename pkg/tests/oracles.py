"""Slow, obviously-correct reference computations used as test oracles.

Nothing here imports the package under test except for data containers.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from fractions import Fraction

import numpy as np


def tally_ranking(corpus, post="post"):
    """Token ids ordered by R = mean loss x freq, descending, ties by id."""
    scores = {}
    freq = Counter()
    sums = defaultdict(list)
    for traj in corpus.trajectories:
        for tok, loss in zip(traj.tokens.tolist(), traj.losses[post].tolist()):
            freq[tok] += 1
            sums[tok].append(loss)
    for t in freq:
        scores[t] = math.fsum(sums[t]) / freq[t] * freq[t]
    return sorted(scores, key=lambda t: (-scores[t], t)), scores


def finite_difference_kl_grad(p_logits, q, h=1e-5):
    """Central differences of KL(softmax(z) || q) in the logits z."""
    z = np.asarray(p_logits, dtype=float)
    q = np.asarray(q, dtype=float)

    def kl(zz):
        e = np.exp(zz - zz.max())
        p = e / e.sum()
        return float(np.sum(p * (np.log(p) - np.log(q))))

    g = np.zeros_like(z)
    for i in range(len(z)):
        up, dn = z.copy(), z.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (kl(up) - kl(dn)) / (2 * h)
    return g


def mann_whitney_exact_two_sided(a, b):
    """Enumerate every relabelling of the pooled sample (no ties assumed)."""
    pooled = list(a) + list(b)
    n, m = len(a), len(b)
    u_obs = sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)
    us = []
    for idx in itertools.combinations(range(n + m), n):
        first = [pooled[i] for i in idx]
        rest = [pooled[i] for i in range(n + m) if i not in idx]
        us.append(sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in first for y in rest))
    lower = sum(u <= u_obs for u in us) / len(us)
    upper = sum(u >= u_obs for u in us) / len(us)
    return u_obs, min(1.0, 2 * min(lower, upper))


def wilcoxon_exact_greater(pre, post):
    """One-sided exact p (pre > post) by enumerating all sign patterns."""
    d = [x - y for x, y in zip(pre, post) if x != y]
    ranks = _midranks([abs(v) for v in d])
    w_obs = sum(r for r, v in zip(ranks, d) if v > 0)
    count = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        total += 1
        if sum(r for r, s in zip(ranks, signs) if s) >= w_obs - 1e-12:
            count += 1
    return w_obs, count / total


def _midranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def binomial_two_sided_fraction(k, n):
    pmf = [Fraction(math.comb(n, i), 2**n) for i in range(n + 1)]
    return min(Fraction(1), 2 * min(sum(pmf[: k + 1]), sum(pmf[k:])))


def bh_bruteforce(p, q):
    """Largest k such that the k smallest p-values satisfy p_(k) <= k q / m,
    found by checking every subset size; returns the rejected index set."""
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    best = 0
    for k in range(1, m + 1):
        if p[order[k - 1]] <= k * q / m:
            best = k
    return set(order[:best])


def bh_subset_definition(p, q):
    """Among all 2^m subsets, the largest R such that R is exactly the set
    of p-values <= |R| q / m (the self-consistency form of step-up)."""
    m = len(p)
    best = set()
    for mask in range(1 << m):
        r = {i for i in range(m) if mask >> i & 1}
        if not r:
            continue
        thr = len(r) * q / m
        if r == {i for i in range(m) if p[i] <= thr} and len(r) > len(best):
            best = r
    return best


def covered_positions(windows):
    out = set()
    for tid, s, e in windows:
        out.update((tid, t) for t in range(s, e + 1))
    return out


def sort_quantile(values, pct):
    """Linear-interpolation percentile by explicit sorting (numpy's default rule)."""
    v = sorted(values)
    pos = (len(v) - 1) * pct / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def pearson_reference(x, y):
    from scipy import stats

    res = stats.pearsonr(x, y)
    return float(res.statistic), float(res.pvalue)
