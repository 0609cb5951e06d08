"""Decode-time knockouts: ban a token (or a token and its window companions)
during sampling, measure the paired accuracy change, and summarize many
candidates into a census with the multiplicity checks it needs."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .detect import DetectionConfig, OccurrenceRef, TokenAggregate, similarity_matrix
from .rng import derive_seed, substream
from .stats import (
    BootstrapResult,
    CorrectionReport,
    UndefinedCorrelationError,
    benjamini_hochberg,
    binomial_two_sided,
    bonferroni,
    paired_bootstrap,
    pearson,
)

log = logging.getLogger(__name__)

STRONG_PILLAR, NEUTRAL, STRONG_STUMBLING = "strong_pillar", "neutral", "strong_stumbling"
CATEGORIES = (STRONG_PILLAR, NEUTRAL, STRONG_STUMBLING)
STARVATION_MASS = 1.0 - 1e-9
PREDICTORS = (
    "frequency",
    "rock_count",
    "rock_rate",
    "pre_kl",
    "post_kl",
    "kl_improvement",
    "teacher_entropy",
    "student_entropy_pre",
    "student_entropy_post",
)


class KnockoutConfigError(ValueError):
    pass


class Policy(Protocol):
    temperature: float

    def logits(self, rows: np.ndarray) -> np.ndarray: ...


class Environment(Protocol):
    base_policy: Policy

    def evaluate(self, policy: Policy, prompts: Sequence[int], rollouts_per_prompt: int, seed: int) -> np.ndarray: ...


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


@dataclass
class KnockoutPolicy:
    """Wraps a policy and sends the banned tokens' logits to -inf.

    Temperature is the base policy's.  ``starved(rows)`` flags rows where the
    ban removes essentially all probability mass; samplers then emit the
    fallback token and count a starvation event.
    """

    base: Policy
    banned: frozenset
    fallback_token: int | None = None
    starvation_events: int = 0

    @property
    def temperature(self) -> float:
        return getattr(self.base, "temperature", 1.0)

    def logits(self, rows: np.ndarray) -> np.ndarray:
        z = np.array(self.base.logits(rows), dtype=float, copy=True)
        if self.banned:
            z[..., sorted(self.banned)] = -np.inf
        return z

    def probs(self, rows: np.ndarray) -> np.ndarray:
        return np.exp(_log_softmax(self.logits(rows)))

    def starved(self, rows: np.ndarray) -> np.ndarray:
        if not self.banned:
            return np.zeros(len(rows), dtype=bool)
        p = np.exp(_log_softmax(np.asarray(self.base.logits(rows), dtype=float)))
        return p[:, sorted(self.banned)].sum(axis=1) >= STARVATION_MASS


def knockout_policy(base: Policy, banned: Iterable[int], fallback_token: int | None = None) -> KnockoutPolicy:
    return KnockoutPolicy(base, frozenset(int(v) for v in banned), fallback_token)


@dataclass
class KnockoutRecord:
    candidate: int
    delta_token: float
    delta_window: float | None
    bootstrap_token: BootstrapResult
    bootstrap_window: BootstrapResult | None
    window_tokens: tuple[int, ...] = ()
    category: str | None = None
    epsilon: float | None = None
    alpha: float = 0.05
    baseline: np.ndarray = field(default=None, repr=False)
    token_arm: np.ndarray = field(default=None, repr=False)
    window_arm: np.ndarray = field(default=None, repr=False)

    @property
    def p_value(self) -> float:
        """Smaller of the token-arm and window-arm bootstrap p-values."""
        ps = [self.bootstrap_token.p_value]
        if self.bootstrap_window is not None:
            ps.append(self.bootstrap_window.p_value)
        return min(ps)

    def row(self) -> dict:
        bw = self.bootstrap_window
        return {
            "candidate": self.candidate,
            "delta_token": self.delta_token,
            "ci_token_low": self.bootstrap_token.ci_low,
            "ci_token_high": self.bootstrap_token.ci_high,
            "p_token": self.bootstrap_token.p_value,
            "delta_window": self.delta_window,
            "ci_window_low": bw.ci_low if bw else None,
            "ci_window_high": bw.ci_high if bw else None,
            "p_window": bw.p_value if bw else None,
            "window_size": len(self.window_tokens),
            "category": self.category,
        }

    def to_dict(self) -> dict:
        out = self.row()
        out["window_tokens"] = list(self.window_tokens)
        out["epsilon"] = self.epsilon
        out["indicators"] = {
            "baseline": [int(x) for x in self.baseline] if self.baseline is not None else None,
            "token": [int(x) for x in self.token_arm] if self.token_arm is not None else None,
            "window": [int(x) for x in self.window_arm] if self.window_arm is not None else None,
        }
        return out


def measure_delta(
    env: Environment,
    candidate: int,
    window_tokens: Iterable[int] | None = None,
    prompts: int | Sequence[int] = 200,
    rollouts_per_prompt: int = 5,
    seed: int = 0,
    resamples: int = 10_000,
    alpha: float = 0.05,
    baseline: np.ndarray | None = None,
) -> KnockoutRecord:
    """Paired accuracy deltas for the token arm and (optionally) the window arm.

    All arms share the prompt list and the evaluation seed, so a candidate
    the base policy never samples yields identical indicators.  A
    precomputed ``baseline`` indicator vector can be passed to save one arm.
    """
    prompt_list = list(range(prompts)) if isinstance(prompts, (int, np.integer)) else list(prompts)
    if not prompt_list:
        raise KnockoutConfigError("need at least one prompt")
    if baseline is None:
        baseline = env.evaluate(env.base_policy, prompt_list, rollouts_per_prompt, seed)
    token_arm = env.evaluate(knockout_policy(env.base_policy, {candidate}), prompt_list, rollouts_per_prompt, seed)
    boot_seed = derive_seed(seed, "bootstrap", candidate)
    bt = paired_bootstrap(baseline, token_arm, resamples=resamples, seed=boot_seed, alpha=alpha)
    window = None
    dw = bw = None
    wt: tuple[int, ...] = ()
    if window_tokens is not None:
        wt = tuple(sorted({int(candidate), *(int(v) for v in window_tokens)}))
        window = env.evaluate(knockout_policy(env.base_policy, wt), prompt_list, rollouts_per_prompt, seed)
        bw = paired_bootstrap(baseline, window, resamples=resamples, seed=derive_seed(boot_seed, "window"), alpha=alpha)
        dw = bw.point_estimate
    return KnockoutRecord(
        candidate=int(candidate),
        delta_token=bt.point_estimate,
        delta_window=dw,
        bootstrap_token=bt,
        bootstrap_window=bw,
        window_tokens=wt,
        alpha=alpha,
        baseline=np.asarray(baseline),
        token_arm=np.asarray(token_arm),
        window_arm=None if window is None else np.asarray(window),
    )


def categorize(record: KnockoutRecord, epsilon: float = 0.01, alpha: float | None = None) -> str:
    """Pillar if the more negative arm is at most -epsilon and that arm's
    bootstrap rejects; stumbling block symmetrically at +epsilon; pillar wins
    if both hold."""
    alpha = record.alpha if alpha is None else alpha
    arms = [(record.delta_token, record.bootstrap_token)]
    if record.delta_window is not None and record.bootstrap_window is not None:
        arms.append((record.delta_window, record.bootstrap_window))
    lo = min(d for d, _ in arms)
    hi = max(d for d, _ in arms)
    if lo <= -epsilon and any(b.rejects(alpha) for d, b in arms if d == lo):
        return STRONG_PILLAR
    if hi >= epsilon and any(b.rejects(alpha) for d, b in arms if d == hi):
        return STRONG_STUMBLING
    return NEUTRAL


def window_companions(
    occurrences: Mapping[int, Sequence[OccurrenceRef]],
    candidates: Sequence[int],
    gamma: float,
    max_per_token: int = 200,
    seed: int = 0,
) -> dict[int, tuple[int, ...]]:
    """For each candidate, the other candidates whose retained occurrences have
    a context fingerprint within similarity ``gamma`` of one of its own.

    Fingerprints are de-duplicated per token and capped at ``max_per_token``
    (seeded subsample) to bound the pairwise cost.
    """
    cands = sorted(set(int(c) for c in candidates))
    bags: list[dict] = []
    owner: list[int] = []
    for v in cands:
        seen = {}
        for occ in occurrences.get(v, ()):
            key = tuple(sorted(occ.context_fingerprint.items()))
            seen.setdefault(key, occ.context_fingerprint)
        uniq = [seen[k] for k in sorted(seen)]
        if len(uniq) > max_per_token:
            pick = substream(seed, "companions", v).choice(len(uniq), size=max_per_token, replace=False)
            uniq = [uniq[i] for i in sorted(pick)]
        bags.extend(uniq)
        owner.extend([v] * len(uniq))
    out = {v: () for v in cands}
    if not bags:
        return out
    sim = similarity_matrix(bags) >= gamma
    owner_arr = np.array(owner)
    for v in cands:
        rows = owner_arr == v
        if not rows.any():
            continue
        linked = np.unique(owner_arr[sim[rows].any(axis=0)])
        out[v] = tuple(int(u) for u in linked if u != v)
    return out


def evaluate_candidates(
    env: Environment,
    candidates: Sequence[int],
    companions: Mapping[int, Sequence[int]] | None = None,
    prompts: int | Sequence[int] = 200,
    rollouts_per_prompt: int = 5,
    seed: int = 0,
    resamples: int = 10_000,
    alpha: float = 0.05,
    epsilon: float = 0.01,
) -> list[KnockoutRecord]:
    prompt_list = list(range(prompts)) if isinstance(prompts, (int, np.integer)) else list(prompts)
    baseline = env.evaluate(env.base_policy, prompt_list, rollouts_per_prompt, seed)
    out = []
    for v in candidates:
        wt = None if companions is None else companions.get(int(v), ())
        rec = measure_delta(env, v, wt, prompt_list, rollouts_per_prompt, seed, resamples, alpha, baseline)
        rec.category = categorize(rec, epsilon, alpha)
        rec.epsilon = epsilon
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# census


@dataclass(frozen=True)
class CensusReport:
    counts: dict
    fractions: dict
    baseline_accuracy: float
    negatives: int
    positives: int
    sign_test_p: float | None
    bonferroni: CorrectionReport
    benjamini_hochberg: tuple[CorrectionReport, ...]
    correlations: dict
    core_negatives: int
    core_positives: int
    core_sign_test_p: float | None
    candidates: tuple[int, ...]

    def to_dict(self) -> dict:
        def corr(rep: CorrectionReport) -> dict:
            return {
                "method": rep.method,
                "threshold_or_level": rep.threshold_or_level,
                "rejected": sorted(self.candidates[i] for i in rep.rejected),
            }

        return {
            "counts": self.counts,
            "fractions": self.fractions,
            "baseline_accuracy": self.baseline_accuracy,
            "sign_split": {"negative": self.negatives, "positive": self.positives, "p": self.sign_test_p},
            "stable_core": {"negative": self.core_negatives, "positive": self.core_positives, "p": self.core_sign_test_p},
            "bonferroni": corr(self.bonferroni),
            "benjamini_hochberg": [corr(r) for r in self.benjamini_hochberg],
            "correlations": self.correlations,
        }


def rejection_sign(record: KnockoutRecord, alpha: float = 0.05) -> int:
    """-1 or +1 for the sign of the delta on the arm with the smallest
    bootstrap p-value when that arm rejects; 0 when no arm rejects or the
    delta is exactly zero."""
    arms = [(record.bootstrap_token.p_value, record.delta_token, record.bootstrap_token)]
    if record.bootstrap_window is not None:
        arms.append((record.bootstrap_window.p_value, record.delta_window, record.bootstrap_window))
    p, d, boot = min(arms, key=lambda a: a[0])
    if not boot.rejects(alpha) or d == 0:
        return 0
    return -1 if d < 0 else 1


def sign_test(negatives: int, positives: int) -> float | None:
    n = negatives + positives
    return binomial_two_sided(negatives, n) if n else None


def census(
    records: Sequence[KnockoutRecord],
    core_set: Iterable[int] = (),
    aggregates: Sequence[TokenAggregate] | Mapping[int, TokenAggregate] | None = None,
    entropies: Mapping[int, Mapping[str, float]] | None = None,
    alpha: float = 0.05,
    bh_levels: Sequence[float] = (0.05, 0.10, 0.20),
) -> CensusReport:
    """Category counts, the rejection-sign test (overall and on the stable
    core), Bonferroni/BH over the per-candidate p-values, and optionally the
    predictor correlations."""
    if not records:
        raise KnockoutConfigError("census needs at least one record")
    cats = [r.category or NEUTRAL for r in records]
    counts = {c: cats.count(c) for c in CATEGORIES}
    n = len(records)
    fractions = {c: counts[c] / n for c in CATEGORIES}
    signs = [rejection_sign(r, alpha) for r in records]
    neg, pos = signs.count(-1), signs.count(1)
    core = set(int(v) for v in core_set)
    core_signs = [s for r, s in zip(records, signs) if r.candidate in core]
    cneg, cpos = core_signs.count(-1), core_signs.count(1)
    pvals = [r.p_value for r in records]
    base = records[0].baseline
    correlations = {}
    if aggregates is not None and entropies is not None:
        correlations = predictor_table(records, aggregates, entropies)
    return CensusReport(
        counts=counts,
        fractions=fractions,
        baseline_accuracy=float(np.mean(base)) if base is not None else float("nan"),
        negatives=neg,
        positives=pos,
        sign_test_p=sign_test(neg, pos),
        bonferroni=bonferroni(pvals, alpha),
        benjamini_hochberg=tuple(benjamini_hochberg(pvals, q) for q in bh_levels),
        correlations=correlations,
        core_negatives=cneg,
        core_positives=cpos,
        core_sign_test_p=sign_test(cneg, cpos),
        candidates=tuple(r.candidate for r in records),
    )


def predictor_values(
    agg: TokenAggregate, ent: Mapping[str, float]
) -> dict[str, float]:
    return {
        "frequency": float(agg.freq),
        "rock_count": float(agg.rock_occurrences),
        "rock_rate": float(agg.ccr),
        "pre_kl": agg.mean_loss_pre,
        "post_kl": agg.mean_loss_post,
        "kl_improvement": agg.mean_loss_pre - agg.mean_loss_post,
        "teacher_entropy": float(ent["teacher"]),
        "student_entropy_pre": float(ent["student_pre"]),
        "student_entropy_post": float(ent["student_post"]),
    }


def predictor_table(
    records: Sequence[KnockoutRecord],
    aggregates: Sequence[TokenAggregate] | Mapping[int, TokenAggregate],
    entropies: Mapping[int, Mapping[str, float]],
) -> dict[str, dict]:
    """Pearson (r, p) of the token-arm delta against each predictor.

    A predictor (or delta) without variance yields an ``error`` entry
    instead of numbers.
    """
    by_id = aggregates if isinstance(aggregates, Mapping) else {a.token_id: a for a in aggregates}
    cols: dict[str, list[float]] = {p: [] for p in PREDICTORS}
    deltas = []
    for r in records:
        if r.candidate not in by_id:
            raise KeyError(f"token {r.candidate} has no aggregate row")
        if r.candidate not in entropies:
            raise KeyError(f"token {r.candidate} has no entropy row")
        vals = predictor_values(by_id[r.candidate], entropies[r.candidate])
        for p in PREDICTORS:
            cols[p].append(vals[p])
        deltas.append(r.delta_token)
    out = {}
    for p in PREDICTORS:
        try:
            res = pearson(deltas, cols[p])
            out[p] = {"r": res.statistic, "p": res.p_value}
        except (UndefinedCorrelationError, ValueError) as exc:
            out[p] = {"error": str(exc)}
    return out


def token_entropies(corpus, pre: str = "pre", post: str = "post") -> dict[int, dict[str, float]]:
    """Mean entropy of the teacher and student distributions at each token's
    positions, from stored distributions (tail mass spread uniformly)."""
    V = corpus.vocabulary.size
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for traj in sorted(corpus.trajectories, key=lambda t: t.trajectory_id):
        if traj.dists is None or pre not in traj.dists or post not in traj.dists:
            continue
        cols = []
        for dist in (traj.dists[post].teacher, traj.dists[pre].student, traj.dists[post].student):
            p = dist.dense(V)
            with np.errstate(divide="ignore", invalid="ignore"):
                cols.append(-np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1))
        stacked = np.stack(cols, axis=1)
        for k, t in enumerate(traj.tokens.tolist()):
            if t not in sums:
                sums[t] = np.zeros(3)
                counts[t] = 0
            sums[t] += stacked[k]
            counts[t] += 1
    return {
        t: dict(zip(("teacher", "student_pre", "student_post"), (sums[t] / counts[t]).tolist()))
        for t in sorted(sums)
    }


# ---------------------------------------------------------------------------
# null calibration


class NullCalibration(NamedTuple):
    pillar_rate: float
    stumbling_rate: float
    n_candidates: int
    records: tuple


def null_calibration(
    env: Environment,
    phantom_tokens: Sequence[int],
    n_candidates: int = 200,
    prompts: int | Sequence[int] = 200,
    rollouts_per_prompt: int = 1,
    seed: int = 0,
    epsilon: float = 0.01,
    alpha: float = 0.05,
    resamples: int = 10_000,
    paired: bool = False,
) -> NullCalibration:
    """False-positive rate of the pillar rule when nothing can matter.

    Each candidate bans a phantom token (zero probability everywhere).  With
    ``paired=True`` the treated arm reuses the baseline seed and every delta
    is exactly zero.  With ``paired=False`` the treated arm is sampled from
    an independent seed per candidate, so the two arms differ only by
    sampling noise; that is the setting that exercises the bootstrap.
    """
    if not phantom_tokens:
        raise KnockoutConfigError("need at least one phantom token")
    prompt_list = list(range(prompts)) if isinstance(prompts, (int, np.integer)) else list(prompts)
    baseline = env.evaluate(env.base_policy, prompt_list, rollouts_per_prompt, seed)
    recs = []
    for i in range(n_candidates):
        tok = int(phantom_tokens[i % len(phantom_tokens)])
        arm_seed = seed if paired else derive_seed(seed, "null-arm", i)
        treated = env.evaluate(knockout_policy(env.base_policy, {tok}), prompt_list, rollouts_per_prompt, arm_seed)
        bt = paired_bootstrap(baseline, treated, resamples=resamples, seed=derive_seed(seed, "null-boot", i), alpha=alpha)
        rec = KnockoutRecord(tok, bt.point_estimate, None, bt, None, alpha=alpha, baseline=baseline, token_arm=treated)
        rec.category = categorize(rec, epsilon, alpha)
        rec.epsilon = epsilon
        recs.append(rec)
    cats = [r.category for r in recs]
    return NullCalibration(
        cats.count(STRONG_PILLAR) / n_candidates,
        cats.count(STRONG_STUMBLING) / n_candidates,
        n_candidates,
        tuple(recs),
    )


def records_csv(records: Sequence[KnockoutRecord], vocabulary=None) -> str:
    buf = io.StringIO()
    rows = sorted((r.row() for r in records), key=lambda d: (d["delta_token"], d["candidate"]))
    cols = list(rows[0]) if rows else ["candidate"]
    if vocabulary is not None:
        cols.append("surface")
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for d in rows:
        if vocabulary is not None:
            d["surface"] = vocabulary[d["candidate"]]
        w.writerow(d)
    return buf.getvalue()
