"""Logit-space gradient geometry of the reverse-KL loss, and the per-group
persistence comparison between two training checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .rng import substream
from .stats import DegenerateSampleError, TestResult, mann_whitney, wilcoxon_signed_rank
from .trace import Corpus

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
GROUPS = ("rock", "rare_high_kl", "random_control")


def _prepare(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    for name, x in (("p", p), ("q", q)):
        if np.any(x < 0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError(f"{name} is not a probability vector")
    p = np.maximum(p, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    return p / p.sum(axis=-1, keepdims=True), q / q.sum(axis=-1, keepdims=True)


def reverse_kl_logit_gradient(p, q) -> np.ndarray:
    """Gradient of KL(p || q) with respect to the student logits behind ``p``.

    g_k = p_k ((ln p_k - ln q_k) - D) with D the divergence itself.  Works
    row-wise on 2-d input.  Entries are floored at 1e-12 and renormalized.
    """
    p, q = _prepare(p, q)
    diff = np.log(p) - np.log(q)
    d = np.sum(p * diff, axis=-1, keepdims=True)
    return p * (diff - d)


def reverse_kl(p, q) -> np.ndarray | float:
    p, q = _prepare(p, q)
    out = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TokenGradientSummary:
    token_id: int
    group: str
    n_occurrences: int
    mean_gradient: np.ndarray = field(repr=False)
    norm: float
    cos_balanced: float | None  # None when the cosine is undefined
    contribution: float | None

    def row(self) -> dict:
        return {
            "token_id": self.token_id,
            "group": self.group,
            "n": self.n_occurrences,
            "norm": self.norm,
            "cos_balanced": self.cos_balanced,
            "contribution": self.contribution,
        }


@dataclass(frozen=True)
class GradientSummary:
    tokens: tuple[TokenGradientSummary, ...]
    balanced: np.ndarray = field(repr=False)
    excluded: tuple[int, ...] = ()

    def total_contribution(self) -> float | None:
        vals = [t.contribution for t in self.tokens]
        if any(v is None for v in vals):
            return None
        return float(np.sum(vals))

    def projected_total(self) -> float | None:
        """<sum_t n_t g_t, G> / |G| computed directly, for checking the decomposition."""
        norm = float(np.linalg.norm(self.balanced))
        if norm == 0.0:
            return None
        weighted = np.sum([t.n_occurrences * t.mean_gradient for t in self.tokens], axis=0)
        return float(weighted @ self.balanced) / norm


def summarize_gradients(
    corpus: Corpus,
    checkpoint: str,
    groups: Mapping[int, str],
    vocab_size: int | None = None,
) -> GradientSummary:
    """Per-token mean gradient, the balanced direction and each token's contribution.

    The balanced direction is the plain sum of the per-token mean gradients
    of the tokens in ``groups``, so every token type weighs the same.
    Tokens without any stored distribution at ``checkpoint`` are excluded
    and listed.
    """
    V = vocab_size or corpus.vocabulary.size
    wanted = {int(t) for t in groups}
    sums = {t: np.zeros(V) for t in wanted}
    counts = dict.fromkeys(wanted, 0)
    for traj in sorted(corpus.trajectories, key=lambda tr: tr.trajectory_id):
        if traj.dists is None or checkpoint not in traj.dists:
            continue
        sel = np.flatnonzero(np.isin(traj.tokens, list(wanted)))
        if sel.size == 0:
            continue
        pair = traj.dists[checkpoint]
        p = pair.student.dense(V)[sel]
        q = pair.teacher.dense(V)[sel]
        g = reverse_kl_logit_gradient(p, q)
        for k, t in enumerate(traj.tokens[sel].tolist()):
            sums[t] += g[k]
            counts[t] += 1
    excluded = tuple(sorted(t for t in wanted if counts[t] == 0))
    if excluded:
        log.warning("no distributions for tokens %s at %r; excluded", list(excluded), checkpoint)
    kept = sorted(t for t in wanted if counts[t] > 0)
    means = {t: sums[t] / counts[t] for t in kept}
    balanced = np.sum([means[t] for t in kept], axis=0) if kept else np.zeros(V)
    bnorm = float(np.linalg.norm(balanced))
    out = []
    for t in kept:
        g = means[t]
        norm = float(np.linalg.norm(g))
        if bnorm == 0.0:
            cos, contrib = None, None
        elif norm == 0.0:
            cos, contrib = None, 0.0
        else:
            cos = float(g @ balanced) / (norm * bnorm)
            contrib = counts[t] * norm * cos
        out.append(TokenGradientSummary(t, groups[t], counts[t], g, norm, cos, contrib))
    return GradientSummary(tuple(out), balanced, excluded)


class GroupComparison(NamedTuple):
    median_norm_a: float
    median_norm_b: float
    mw_p: float
    median_cos_a: float | None
    median_cos_b: float | None


def _median_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def compare_groups(summaries: GradientSummary | Sequence[TokenGradientSummary], group_a: str, group_b: str) -> GroupComparison:
    items = summaries.tokens if isinstance(summaries, GradientSummary) else summaries
    a = [s for s in items if s.group == group_a]
    b = [s for s in items if s.group == group_b]
    if not a or not b:
        missing = group_a if not a else group_b
        raise ValueError(f"group {missing!r} has no summarized tokens")
    res = mann_whitney([s.norm for s in a], [s.norm for s in b])
    return GroupComparison(
        float(np.median([s.norm for s in a])),
        float(np.median([s.norm for s in b])),
        res.p_value,
        _median_or_none(s.cos_balanced for s in a),
        _median_or_none(s.cos_balanced for s in b),
    )


# ---------------------------------------------------------------------------
# persistence


class PersistenceRecord(NamedTuple):
    token_id: int
    group: str
    kl_early: float
    kl_late: float
    delta_kl: float


@dataclass(frozen=True)
class GroupPersistence:
    group: str
    n_tokens: int
    median_kl_early: float
    median_kl_late: float
    median_delta: float
    median_relative_reduction: float | None
    wilcoxon: TestResult | None  # two-sided
    wilcoxon_reduction: TestResult | None  # one-sided, early > late
    note: str = ""


@dataclass(frozen=True)
class PersistenceResult:
    records: tuple[PersistenceRecord, ...]
    groups: dict
    warnings: tuple[str, ...] = ()


def token_mean_losses(corpus: Corpus, checkpoint: str) -> tuple[np.ndarray, np.ndarray]:
    """(frequency, mean loss) per token id, from the stored per-position losses."""
    flat = corpus.flat
    V = max(corpus.vocabulary.size, int(flat.tokens.max()) + 1 if len(flat.tokens) else 0)
    freq = np.bincount(flat.tokens, minlength=V)
    total = np.bincount(flat.tokens, weights=flat.losses[checkpoint], minlength=V)
    return freq, np.divide(total, freq, out=np.zeros(V), where=freq > 0)


def persistence_analysis(
    corpus: Corpus, early: str, late: str, groups: Mapping[int, str], min_group: int = 3
) -> PersistenceResult:
    corpus.require(early, late)
    freq, kl_e = token_mean_losses(corpus, early)
    _, kl_l = token_mean_losses(corpus, late)
    records = []
    for t in sorted(int(x) for x in groups):
        if t >= len(freq) or freq[t] == 0:
            continue
        e, l = float(kl_e[t]), float(kl_l[t])
        records.append(PersistenceRecord(t, groups[t], e, l, l - e))
    warnings = []
    summary = {}
    for g in sorted(set(groups.values())):
        recs = [r for r in records if r.group == g]
        if len(recs) < min_group:
            msg = f"group {g!r} has {len(recs)} tokens (< {min_group}); skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        e = np.array([r.kl_early for r in recs])
        l = np.array([r.kl_late for r in recs])
        rel = [(a - b) / a for a, b in zip(e, l) if a > 0]
        note = ""
        try:
            two = wilcoxon_signed_rank(e, l)
            one = wilcoxon_signed_rank(e, l, alternative="greater")
        except DegenerateSampleError:
            two = one = None
            note = "no change"
        summary[g] = GroupPersistence(
            group=g,
            n_tokens=len(recs),
            median_kl_early=float(np.median(e)),
            median_kl_late=float(np.median(l)),
            median_delta=float(np.median(l - e)),
            median_relative_reduction=float(np.median(rel)) if rel else None,
            wilcoxon=two,
            wilcoxon_reduction=one,
            note=note,
        )
    return PersistenceResult(tuple(records), summary, tuple(warnings))


def rare_high_kl_tokens(
    corpus: Corpus,
    checkpoint: str,
    freq_pct: float = 20.0,
    kl_pct: float = 95.0,
    exclude: Iterable[int] = (),
) -> tuple[int, ...]:
    """Tokens at or below the ``freq_pct`` frequency percentile and at or above
    the ``kl_pct`` mean-loss percentile, both taken over the occurring tokens
    that are not excluded."""
    freq, kl = token_mean_losses(corpus, checkpoint)
    banned = set(int(x) for x in exclude)
    pool = np.array([t for t in np.flatnonzero(freq) if int(t) not in banned], dtype=np.int64)
    if pool.size == 0:
        return ()
    f_cut = np.percentile(freq[pool], freq_pct)
    k_cut = np.percentile(kl[pool], kl_pct)
    return tuple(int(t) for t in pool if freq[t] <= f_cut and kl[t] >= k_cut)


def build_groups(
    corpus: Corpus,
    rock_set: Iterable[int],
    checkpoint: str,
    n_control: int | None = None,
    seed: int = 0,
    freq_pct: float = 20.0,
    kl_pct: float = 95.0,
) -> dict[int, str]:
    """Token -> group map: rocks, rare high-loss tokens, and a seeded random
    control drawn from the remaining occurring tokens (as many as rocks by default)."""
    rocks = sorted(set(int(v) for v in rock_set))
    groups = {v: "rock" for v in rocks}
    for v in rare_high_kl_tokens(corpus, checkpoint, freq_pct, kl_pct, exclude=rocks):
        groups[v] = "rare_high_kl"
    freq, _ = token_mean_losses(corpus, checkpoint)
    rest = [int(t) for t in np.flatnonzero(freq) if int(t) not in groups]
    n = len(rocks) if n_control is None else n_control
    if rest and n:
        pick = substream(seed, "random_control").choice(len(rest), size=min(n, len(rest)), replace=False)
        for i in sorted(pick):
            groups[rest[i]] = "random_control"
    return groups
