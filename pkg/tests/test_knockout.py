import numpy as np
import pytest
from scipy import stats as sps

from rocktokens import simlab
from rocktokens.detect import OccurrenceRef, TokenAggregate, select_rock_tokens
from rocktokens.knockout import (
    NEUTRAL,
    PREDICTORS,
    STRONG_PILLAR,
    STRONG_STUMBLING,
    KnockoutConfigError,
    KnockoutRecord,
    categorize,
    census,
    evaluate_candidates,
    knockout_policy,
    measure_delta,
    predictor_table,
    records_csv,
    rejection_sign,
    token_entropies,
    window_companions,
)
from rocktokens.stats import BootstrapResult


class UniformPolicy:
    temperature = 0.7

    def logits(self, rows):
        return np.zeros((len(rows), 4))


def _boot(delta, p):
    return BootstrapResult(delta, delta - 0.01, delta + 0.01, p, 10_000, 0)


def _rec(cand, dt, pt, dw=None, pw=None, base=None):
    return KnockoutRecord(
        cand, dt, dw, _boot(dt, pt), None if dw is None else _boot(dw, pw),
        baseline=np.ones(4) if base is None else base,
    )


@pytest.fixture(scope="module")
def env(trained_world):
    return simlab.SimEnvironment.for_checkpoint(trained_world, "post")


# -- policy

def test_uniform_ban_renormalizes():
    pol = knockout_policy(UniformPolicy(), {3})
    p = pol.probs(np.arange(2))
    assert p[:, :3] == pytest.approx(np.full((2, 3), 1 / 3))
    assert np.all(p[:, 3] == 0.0)
    assert pol.temperature == 0.7


def test_empty_ban_is_identity(trained_world):
    base = trained_world.student_policy("post")
    pol = knockout_policy(base, ())
    rows = np.arange(50)
    assert np.array_equal(pol.logits(rows), base.logits(rows))
    a = simlab.evaluate_accuracy(trained_world, base, 30, 3, seed=4)
    b = simlab.evaluate_accuracy(trained_world, pol, 30, 3, seed=4)
    assert np.array_equal(a, b)


def test_zero_probability_ban_changes_nothing(trained_world, env):
    phantom = env.phantom_tokens()[0]
    base = trained_world.student_policy("post")
    rows = np.arange(200)
    assert np.allclose(knockout_policy(base, {phantom}).probs(rows), np.exp(simlab.log_softmax(base.logits(rows))))


def test_starvation_falls_back_and_is_counted(trained_world):
    base = trained_world.student_policy("post")
    # banning all but <end> still leaves mass to renormalize over
    pol = knockout_policy(base, set(range(trained_world.V)) - {trained_world.end})
    simlab.sample(trained_world, pol, [0, 1], [0, 0], seed=0)
    assert pol.starvation_events == 0
    # banning everything starves the first step; the fallback ends the text
    pol = knockout_policy(base, range(trained_world.V))
    ro = simlab.sample(trained_world, pol, [0, 1], [0, 0], seed=0)
    assert pol.starvation_events == 2 == ro.starvation_events
    assert all(t.tolist() == [trained_world.end] for t in ro.tokens)


# -- deltas

def test_zero_prompts_rejected(env):
    with pytest.raises(KnockoutConfigError):
        measure_delta(env, 0, prompts=0)


def test_phantom_delta_is_exactly_zero(env):
    rec = measure_delta(env, env.phantom_tokens()[0], prompts=60, rollouts_per_prompt=3, seed=9, resamples=2000)
    assert rec.delta_token == 0.0
    assert np.array_equal(rec.baseline, rec.token_arm)
    assert not rec.bootstrap_token.rejects()


def test_direct_difference():
    base = np.array([1] * 750 + [0] * 250)
    arm = base.copy()
    arm[:10] = 0
    assert arm.mean() - base.mean() == pytest.approx(-0.010)


def test_planted_pillar_is_load_bearing(trained_world, env):
    rec = measure_delta(env, trained_world.pillar, prompts=200, rollouts_per_prompt=5, seed=9)
    assert rec.delta_token <= -0.05
    assert rec.bootstrap_token.rejects(0.05)
    assert categorize(rec) == STRONG_PILLAR


def test_window_arm_includes_companions(env, trained_world):
    planted = trained_world.planted
    rec = measure_delta(env, planted[0], window_tokens=planted[1:3], prompts=40, rollouts_per_prompt=3, seed=2, resamples=1000)
    assert rec.window_tokens == tuple(sorted(planted[:3]))
    assert rec.delta_window is not None and rec.window_arm is not None
    assert rec.p_value == min(rec.bootstrap_token.p_value, rec.bootstrap_window.p_value)


# -- categorization

def test_categorize_examples():
    assert categorize(_rec(1, -0.02, 0.01)) == STRONG_PILLAR
    assert categorize(_rec(1, -0.02, 0.30)) == NEUTRAL
    assert categorize(_rec(1, 0.005, 0.001, 0.005, 0.001)) == NEUTRAL
    assert categorize(_rec(1, 0.03, 0.01)) == STRONG_STUMBLING
    assert categorize(_rec(1, 0.0, 0.9, -0.05, 0.001)) == STRONG_PILLAR
    # the more negative arm must be the rejecting one
    assert categorize(_rec(1, -0.02, 0.01, -0.05, 0.5)) == NEUTRAL


@pytest.mark.parametrize("p", [0.001, 0.5])
def test_categorize_is_monotone(p):
    order = {STRONG_STUMBLING: 0, NEUTRAL: 1, STRONG_PILLAR: 2}
    deltas = np.linspace(0.05, -0.05, 21)
    cats = [order[categorize(_rec(1, d, p))] for d in deltas]
    assert cats == sorted(cats)


# -- census

def test_census_all_negative_rejections():
    recs = [_rec(i, -0.02, 0.001) for i in range(10)]
    for r in recs:
        r.category = categorize(r)
    rep = census(recs)
    assert rep.negatives == 10 and rep.positives == 0
    assert rep.sign_test_p == 0.001953125
    assert sum(rep.fractions.values()) == pytest.approx(1.0, abs=1e-9)


def test_census_bonferroni_and_bh_reject_nothing():
    recs = [_rec(i, 0.0, 0.5) for i in range(198)] + [_rec(198, -0.02, 0.0038), _rec(199, -0.02, 0.0016)]
    rep = census(recs, alpha=0.05)
    assert rep.bonferroni.threshold_or_level == 2.5e-4
    assert rep.bonferroni.rejected == frozenset()
    assert all(r.rejected == frozenset() for r in rep.benjamini_hochberg)


def test_census_stable_core():
    recs = [_rec(i, -0.02, 0.001) for i in range(6)] + [_rec(10 + i, -0.02, 0.001) for i in range(4)]
    rep = census(recs, core_set=range(6))
    assert (rep.core_negatives, rep.core_positives) == (6, 0)
    assert rep.core_sign_test_p == 0.03125


def test_sign_split_counts_only_rejections():
    recs = [_rec(1, -0.02, 0.001), _rec(2, 0.02, 0.2), _rec(3, 0.0, 0.9), _rec(4, 0.03, 0.01)]
    assert [rejection_sign(r) for r in recs] == [-1, 0, 0, 1]
    rep = census(recs)
    assert (rep.negatives, rep.positives) == (1, 1)
    assert rep.sign_test_p == 1.0


def test_census_requires_records():
    with pytest.raises(KnockoutConfigError):
        census([])


# -- predictors

def _agg(t, freq):
    return TokenAggregate(t, freq, 0.5 + t, 0.2 * t, 0.2 * t * freq, freq, freq // 2, 0.5, 0.1, "other")


def _ent(t):
    return {"teacher": 1.0 + 0.1 * t, "student_pre": 2.0 - 0.05 * t * t, "student_post": 1.5 + np.sin(t)}


def test_predictors_zero_variance_delta():
    recs = [_rec(t, -0.01, 0.5) for t in range(5)]
    table = predictor_table(recs, [_agg(t, 10 + t) for t in range(5)], {t: _ent(t) for t in range(5)})
    assert set(table) == set(PREDICTORS)
    assert all("error" in v for v in table.values())


def test_predictors_linear_in_frequency():
    freqs = [3, 8, 20, 41, 77]
    recs = [_rec(t, 0.002 * f - 0.1, 0.5) for t, f in enumerate(freqs)]
    table = predictor_table(recs, [_agg(t, f) for t, f in enumerate(freqs)], {t: _ent(t) for t in range(5)})
    assert table["frequency"]["r"] == pytest.approx(1.0)


def test_predictors_missing_row_names_token():
    with pytest.raises(KeyError, match="17"):
        predictor_table([_rec(17, 0.0, 1.0)], [_agg(1, 3)], {17: _ent(1)})


def test_simulator_predictors_match_scipy(trained_world, env, golden_corpus):
    rep = select_rock_tokens(golden_corpus)
    cands = list(rep.rock_set[:8]) + [trained_world.pillar]
    recs = evaluate_candidates(env, cands, prompts=80, rollouts_per_prompt=3, seed=9, resamples=2000)
    ent = token_entropies(golden_corpus)
    table = predictor_table(recs, rep.tokens, ent)
    deltas = [r.delta_token for r in recs]
    for name in PREDICTORS:
        from rocktokens.knockout import predictor_values

        xs = [predictor_values(rep.aggregate(r.candidate), ent[r.candidate])[name] for r in recs]
        ref = sps.pearsonr(deltas, xs)
        assert table[name]["r"] == pytest.approx(ref.statistic, abs=1e-6)
        assert table[name]["p"] == pytest.approx(ref.pvalue, abs=1e-6)


def test_entropies_agree_with_world_tables(trained_world, golden_corpus):
    small = golden_corpus.subset(range(30))
    a = token_entropies(small)
    b = simlab.token_entropies(trained_world, small)
    assert set(a) == set(b)
    # simulator distributions are stored without tail mass
    assert all(
        not np.any(blk.tail) for tr in small.trajectories for pair in tr.dists.values() for blk in pair
    )
    for t in a:
        for k in ("teacher", "student_pre", "student_post"):
            assert a[t][k] == pytest.approx(b[t][k], abs=1e-6)


# -- companions and export

def _o(tok, bag):
    return OccurrenceRef(0, 0, tok, 1.0, 1.0, bag)


def test_window_companions_link_similar_contexts():
    occ = {
        1: [_o(1, {5: 1, 6: 1})],
        2: [_o(2, {5: 1, 6: 1, 7: 1})],
        3: [_o(3, {9: 2})],
    }
    comp = window_companions(occ, [1, 2, 3], gamma=0.5)
    assert comp == {1: (2,), 2: (1,), 3: ()}


def test_records_csv_sorted_by_delta():
    recs = [_rec(4, 0.01, 0.5), _rec(2, -0.3, 0.001), _rec(9, 0.0, 1.0)]
    lines = records_csv(recs).splitlines()
    assert lines[0].startswith("candidate,delta_token")
    assert [int(l.split(",")[0]) for l in lines[1:]] == [2, 9, 4]
