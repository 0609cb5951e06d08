import numpy as np
import pytest

import oracles
from rocktokens.gradgeom import (
    build_groups,
    compare_groups,
    persistence_analysis,
    rare_high_kl_tokens,
    reverse_kl,
    reverse_kl_logit_gradient,
    summarize_gradients,
    TokenGradientSummary,
)
from rocktokens.trace import Corpus, DistBlock, DistPair, TrajectoryTrace, Vocabulary


def _random_pair(seed, dim=32):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(dim))
    q = rng.dirichlet(np.ones(dim))
    return np.maximum(p, 1e-6) / np.maximum(p, 1e-6).sum(), np.maximum(q, 1e-6) / np.maximum(q, 1e-6).sum()


def test_gradient_vanishes_at_match():
    p = np.array([0.1, 0.2, 0.7])
    assert np.allclose(reverse_kl_logit_gradient(p, p), 0.0, atol=1e-15)


def test_gradient_two_point_example():
    g = reverse_kl_logit_gradient([0.5, 0.5], [0.25, 0.75])
    assert g == pytest.approx([0.274653, -0.274653], abs=1e-6)
    fd = oracles.finite_difference_kl_grad(np.log([0.5, 0.5]), [0.25, 0.75])
    assert np.max(np.abs(g - fd)) < 1e-6


def test_gradient_matches_finite_differences():
    worst, worst_sum = 0.0, 0.0
    for seed in range(100):
        p, q = _random_pair(seed)
        g = reverse_kl_logit_gradient(p, q)
        fd = oracles.finite_difference_kl_grad(np.log(p), q)
        worst = max(worst, float(np.max(np.abs(g - fd))))
        worst_sum = max(worst_sum, abs(float(g.sum())))
    assert worst < 1e-6
    assert worst_sum < 1e-9


def test_gradient_dimension_mismatch():
    with pytest.raises(ValueError):
        reverse_kl_logit_gradient([0.5, 0.5], [1.0])
    with pytest.raises(ValueError):
        reverse_kl_logit_gradient([0.5, 0.6], [0.5, 0.5])


def test_reverse_kl_known_value():
    assert reverse_kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3))


# -- summaries on hand-built corpora

def _corpus_with_dists(rows):
    """rows: list of (token, p, q) on a 2-token vocabulary, one trajectory each."""
    trajs = []
    for i, (tok, p, q) in enumerate(rows):
        ids = np.array([[0, 1]])
        sp = DistBlock(ids, np.array([p]), np.zeros(1))
        tq = DistBlock(ids, np.array([q]), np.zeros(1))
        trajs.append(TrajectoryTrace(i, 0, [tok], {"post": [reverse_kl(p, q)]}, {"post": DistPair(sp, tq)}))
    return Corpus(tuple(trajs), Vocabulary(("a", "b")), ("post",))


def test_single_token_is_self_aligned():
    corpus = _corpus_with_dists([(0, [0.5, 0.5], [0.25, 0.75]), (0, [0.6, 0.4], [0.3, 0.7])])
    summ = summarize_gradients(corpus, "post", {0: "rock"})
    (t,) = summ.tokens
    assert t.cos_balanced == pytest.approx(1.0)
    assert t.contribution == pytest.approx(2 * t.norm)


def test_cancelling_tokens_give_undefined_cosine():
    corpus = _corpus_with_dists([(0, [0.5, 0.5], [0.25, 0.75]), (1, [0.5, 0.5], [0.75, 0.25])])
    summ = summarize_gradients(corpus, "post", {0: "rock", 1: "rare_high_kl"})
    assert np.allclose(summ.balanced, 0.0)
    assert all(t.cos_balanced is None for t in summ.tokens)
    assert summ.total_contribution() is None and summ.projected_total() is None


def test_tokens_without_dists_are_excluded():
    corpus = _corpus_with_dists([(0, [0.5, 0.5], [0.25, 0.75])])
    summ = summarize_gradients(corpus, "post", {0: "rock", 1: "rock"})
    assert summ.excluded == (1,)
    assert [t.token_id for t in summ.tokens] == [0]


def test_decomposition_identity_on_golden(golden_corpus, trained_world):
    groups = build_groups(golden_corpus, trained_world.planted, "post", freq_pct=50, kl_pct=70)
    summ = summarize_gradients(golden_corpus, "post", groups)
    total, proj = summ.total_contribution(), summ.projected_total()
    assert total == pytest.approx(proj, rel=1e-6)
    for t in summ.tokens:
        assert t.contribution == pytest.approx(t.n_occurrences * t.norm * t.cos_balanced, abs=1e-9)


def test_per_occurrence_gradients_sum_to_zero(golden_corpus):
    V = golden_corpus.vocabulary.size
    for traj in golden_corpus.trajectories[:20]:
        pair = traj.dists["post"]
        g = reverse_kl_logit_gradient(pair.student.dense(V), pair.teacher.dense(V))
        assert np.max(np.abs(g.sum(axis=1))) < 1e-9


# -- group comparison

def _summ(group, norms):
    return [TokenGradientSummary(i, group, 1, np.zeros(1), n, None, None) for i, n in enumerate(norms)]


def test_compare_identical_groups():
    a = _summ("x", [0.1, 0.2, 0.3, 0.4])
    b = _summ("y", [0.1, 0.2, 0.3, 0.4])
    res = compare_groups(a + b, "x", "y")
    assert res.median_norm_a == res.median_norm_b
    assert res.mw_p == pytest.approx(1.0)


def test_compare_dominance_and_symmetry():
    rng = np.random.default_rng(2)
    items = _summ("hi", rng.uniform(1, 2, 50)) + _summ("lo", rng.uniform(0, 1.2, 50))
    ab = compare_groups(items, "hi", "lo")
    ba = compare_groups(items, "lo", "hi")
    assert ab.median_norm_a > ab.median_norm_b and ab.mw_p < 0.05
    assert ab.mw_p == pytest.approx(ba.mw_p)


def test_compare_empty_group():
    with pytest.raises(ValueError):
        compare_groups(_summ("x", [1.0]), "x", "y")


def test_planted_rocks_have_smaller_gradients(golden_corpus, trained_world):
    groups = build_groups(golden_corpus, trained_world.planted, "post", freq_pct=50, kl_pct=70)
    res = compare_groups(summarize_gradients(golden_corpus, "post", groups), "rock", "rare_high_kl")
    assert res.median_norm_a < res.median_norm_b


# -- persistence

def _halving_corpus(n_tokens=8):
    trajs = []
    for v in range(n_tokens):
        e = 1.0 + v
        trajs.append(TrajectoryTrace(v, 0, [v, v], {"early": [e, e], "late": [e / 2, e / 2]}))
    return Corpus(tuple(trajs), Vocabulary(tuple(f"t{i}" for i in range(n_tokens))), ("early", "late"))


def test_identical_checkpoints_report_no_change():
    corpus = _halving_corpus()
    res = persistence_analysis(corpus, "early", "early", {v: "rock" for v in range(8)})
    assert all(r.delta_kl == 0.0 for r in res.records)
    assert res.groups["rock"].note == "no change" and res.groups["rock"].wilcoxon is None


def test_halving_group():
    corpus = _halving_corpus()
    res = persistence_analysis(corpus, "early", "late", {v: "rare_high_kl" for v in range(8)})
    g = res.groups["rare_high_kl"]
    assert g.median_relative_reduction == pytest.approx(0.5)
    assert g.wilcoxon_reduction.p_value == pytest.approx(1 / 256)
    for r in res.records:
        assert r.delta_kl == pytest.approx(r.kl_late - r.kl_early, abs=1e-12)


def test_small_group_is_skipped_with_warning():
    corpus = _halving_corpus(4)
    res = persistence_analysis(corpus, "early", "late", {0: "rock", 1: "rock", 2: "random_control", 3: "random_control"})
    assert res.groups == {}
    assert len(res.warnings) == 2


def test_rare_high_kl_definition(golden_corpus):
    picked = rare_high_kl_tokens(golden_corpus, "post", 20, 95)
    freq = np.bincount(golden_corpus.flat.tokens)
    occurring = np.flatnonzero(freq)
    f_cut = oracles.sort_quantile(freq[occurring].tolist(), 20)
    for v in picked:
        assert freq[v] <= f_cut


def test_planted_rocks_persist(golden_corpus, trained_world):
    groups = build_groups(golden_corpus, trained_world.planted, "post", freq_pct=50, kl_pct=70)
    res = persistence_analysis(golden_corpus, "pre", "post", groups)
    rock = res.groups["rock"].median_relative_reduction
    rare = res.groups["rare_high_kl"].median_relative_reduction
    assert rare > rock
