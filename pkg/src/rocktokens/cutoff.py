"""Choosing how many top-ranked tokens to call rocks.

Two curves are traded off: how reproducible the top-K set is when the
corpus is subsampled (mean Jaccard against the full-corpus top-K), and how
much of the total loss burden the top-K carries (coverage).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .detect import DetectionConfig, TokenAggregate, aggregate_scores, select_rock_tokens
from .rng import substream
from .stats import jaccard
from .trace import Corpus


class CutoffError(ValueError):
    pass


class DegenerateCoverageError(CutoffError):
    pass


def _ranked_scores(aggregates: Sequence[TokenAggregate], use_ctx: bool = False) -> list[tuple[int, float]]:
    key = (lambda a: a.rock_score_ctx) if use_ctx else (lambda a: a.rock_score)
    pairs = [(a.token_id, float(key(a))) for a in aggregates]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return pairs


def coverage_curve(aggregates: Sequence[TokenAggregate], ks: Sequence[int], use_ctx: bool = False) -> list[float]:
    """Share of the summed score held by the top-K tokens, for each K.

    The running sum's last element is the denominator, so the curve ends at
    exactly 1.0 and never decreases.
    """
    if not aggregates:
        raise CutoffError("coverage needs at least one token")
    scores = np.array([s for _, s in _ranked_scores(aggregates, use_ctx)])
    if np.any(scores < 0):
        raise CutoffError("scores must be non-negative")
    cum = np.cumsum(scores)
    total = cum[-1]
    if total <= 0:
        raise DegenerateCoverageError("all scores are zero; coverage undefined")
    out = []
    for k in ks:
        if k < 0:
            raise CutoffError("K must be non-negative")
        out.append(0.0 if k == 0 else float(cum[min(k, len(cum)) - 1] / total))
    return out


def top_k(aggregates: Sequence[TokenAggregate], k: int, use_ctx: bool = False) -> set[int]:
    return {t for t, _ in _ranked_scores(aggregates, use_ctx)[:k]}


class KChoice(NamedTuple):
    k: int
    mean_jaccard: float
    coverage: float
    fallback: bool


@dataclass(frozen=True)
class SweepResult:
    sizes: tuple[int, ...]
    ks: tuple[int, ...]
    jaccard_matrix: np.ndarray  # (len(sizes), len(ks)), mean over repeats
    coverage_curve: tuple[float, ...]
    chosen_k: int
    chosen: KChoice
    repeats: int
    seed: int
    jaccard_raw: np.ndarray = field(repr=False, default=None)  # (sizes, ks, repeats)

    def mean_jaccard(self) -> np.ndarray:
        return self.jaccard_matrix.mean(axis=0)

    def jaccard_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n"] + [f"K={k}" for k in self.ks])
        for n, row in zip(self.sizes, self.jaccard_matrix):
            w.writerow([n] + [float(x) for x in row])
        return buf.getvalue()

    def coverage_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "coverage", "mean_jaccard"])
        for k, c, j in zip(self.ks, self.coverage_curve, self.mean_jaccard()):
            w.writerow([k, c, float(j)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "ks": list(self.ks),
            "jaccard_matrix": [[float(x) for x in row] for row in self.jaccard_matrix],
            "coverage_curve": list(self.coverage_curve),
            "chosen_k": self.chosen_k,
            "chosen": self.chosen._asdict(),
            "repeats": self.repeats,
            "seed": self.seed,
        }


def choose_k(
    sweep: SweepResult | None = None,
    min_jaccard: float = 0.70,
    min_coverage: float = 0.50,
    *,
    ks: Sequence[int] | None = None,
    mean_jaccard: Sequence[float] | None = None,
    coverage: Sequence[float] | None = None,
) -> KChoice:
    """Largest K meeting both floors; otherwise the K with the best average of
    min-max normalized Jaccard and coverage, flagged as a fallback.

    Either pass a sweep or the three curves directly.
    """
    if sweep is not None:
        ks, mean_jaccard, coverage = sweep.ks, sweep.mean_jaccard(), sweep.coverage_curve
    if ks is None or len(ks) == 0:
        raise CutoffError("no candidate K values")
    ks = list(ks)
    jac = np.asarray(mean_jaccard, dtype=float)
    cov = np.asarray(coverage, dtype=float)
    if not len(ks) == len(jac) == len(cov):
        raise CutoffError("K, Jaccard and coverage curves differ in length")
    feasible = [i for i in range(len(ks)) if jac[i] >= min_jaccard and cov[i] >= min_coverage]
    if feasible:
        i = max(feasible, key=lambda j: ks[j])
        return KChoice(int(ks[i]), float(jac[i]), float(cov[i]), False)

    def norm(x):
        span = x.max() - x.min()
        return (x - x.min()) / span if span > 0 else np.zeros_like(x)

    score = (norm(jac) + norm(cov)) / 2.0
    best = score.max()
    i = max((j for j in range(len(ks)) if score[j] == best), key=lambda j: ks[j])
    return KChoice(int(ks[i]), float(jac[i]), float(cov[i]), True)


def stability_sweep(
    corpus: Corpus,
    config: DetectionConfig = DetectionConfig(),
    sizes: Sequence[int] = (50, 100, 200, 400),
    ks: Sequence[int] = (25, 50, 100, 150, 200),
    repeats: int = 8,
    seed: int = 0,
    pre: str = "pre",
    post: str = "post",
    use_ctx: bool = False,
    min_jaccard: float = 0.70,
    min_coverage: float = 0.50,
) -> SweepResult:
    """Jaccard of subsample top-K against full-corpus top-K, per (n, K).

    Trajectories are the sampling unit; draws are without replacement from a
    trajectory-id ordering, so shuffling the corpus file changes nothing.
    The ranking is the stage-1 score unless ``use_ctx`` asks for the
    context-filtered one.
    """
    if repeats < 1:
        raise CutoffError("repeats must be >= 1")
    if not ks:
        raise CutoffError("no candidate K values")
    n_total = len(corpus)
    for n in sizes:
        if not 0 < n <= n_total:
            raise CutoffError(f"subsample size {n} outside 1..{n_total}")

    def rank(c: Corpus) -> list[TokenAggregate]:
        if use_ctx:
            return list(select_rock_tokens(c, config, pre, post).tokens)
        return aggregate_scores(c, pre, post)

    canon = sorted(range(n_total), key=lambda i: corpus.trajectories[i].trajectory_id)
    full = rank(corpus)
    full_top = {k: top_k(full, k, use_ctx) for k in ks}
    raw = np.zeros((len(sizes), len(ks), repeats))
    for a, n in enumerate(sizes):
        for r in range(repeats):
            rng = substream(seed, "sweep", n, r)
            pick = np.sort(rng.choice(n_total, size=n, replace=False))
            sub = rank(corpus.subset([canon[i] for i in pick]))
            for b, k in enumerate(ks):
                raw[a, b, r] = jaccard(top_k(sub, k, use_ctx), full_top[k])
    matrix = raw.mean(axis=2)
    cov = coverage_curve(full, ks, use_ctx)
    choice = choose_k(ks=ks, mean_jaccard=matrix.mean(axis=0), coverage=cov, min_jaccard=min_jaccard, min_coverage=min_coverage)
    return SweepResult(
        sizes=tuple(int(n) for n in sizes),
        ks=tuple(int(k) for k in ks),
        jaccard_matrix=matrix,
        coverage_curve=tuple(cov),
        chosen_k=choice.k,
        chosen=choice,
        repeats=repeats,
        seed=seed,
        jaccard_raw=raw,
    )
