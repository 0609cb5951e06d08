"""Rock-token detection.

Three stages over a corpus scored at two checkpoints: per-token loss burden
(mean post-checkpoint loss times frequency), the occurrences that are high
loss at both checkpoints, and a context-consistency filter that keeps only
occurrences whose surrounding tokens recur across the token's other
high-loss occurrences.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import sparse

from .rng import substream
from .trace import Corpus

CATEGORIES = ("math_delimiter", "markdown_whitespace", "discourse_marker", "digit", "other")
DISCOURSE_MARKERS = frozenset({"So", "Let", "We", "But", "Now", "Wait", "Then", "Since", "This"})
MATH_DELIMITERS = frozenset(
    {"$", "$$", "\\", "=", "{", "}", "frac", "^", "_", "\\(", "\\)", "\\[", "\\]", "dfrac", "cdot", "times"}
)
MARKDOWN_CHARS = frozenset("*#-_>`|:")


class DetectionConfigError(ValueError):
    pass


class ControlSamplingError(RuntimeError):
    def __init__(self, bucket: int, needed: int, available: int):
        super().__init__(
            f"frequency bucket {bucket} (freq in [{2**bucket}, {2 ** (bucket + 1)})) has "
            f"{available} eligible control tokens, needs {needed}"
        )
        self.bucket = bucket


@dataclass(frozen=True)
class Threshold:
    """A loss threshold: an absolute value or a percentile of the checkpoint's losses."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("absolute", "percentile"):
            raise DetectionConfigError(f"threshold kind must be absolute or percentile, got {self.kind!r}")
        if self.kind == "percentile" and not 0.0 < self.value < 100.0:
            raise DetectionConfigError(f"percentile must lie in (0, 100), got {self.value}")

    @classmethod
    def absolute(cls, value: float) -> "Threshold":
        return cls("absolute", float(value))

    @classmethod
    def percentile(cls, value: float) -> "Threshold":
        return cls("percentile", float(value))

    def resolve(self, losses: np.ndarray) -> float:
        if self.kind == "absolute":
            return self.value
        if len(losses) == 0:
            return math.inf
        return float(np.percentile(losses, self.value))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class Selection:
    """Final rock-set rule: ``R_ctx >= value`` or the top ``k`` tokens."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("threshold", "top_k"):
            raise DetectionConfigError(f"selection kind must be threshold or top_k, got {self.kind!r}")
        if self.kind == "top_k" and (self.value < 0 or int(self.value) != self.value):
            raise DetectionConfigError("top_k needs a non-negative integer")

    @classmethod
    def threshold(cls, value: float) -> "Selection":
        return cls("threshold", float(value))

    @classmethod
    def top_k(cls, k: int) -> "Selection":
        return cls("top_k", int(k))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class DetectionConfig:
    tau_pre: Threshold = Threshold.percentile(80.0)
    tau_post: Threshold = Threshold.percentile(80.0)
    w: int = 5
    gamma: float = 0.5
    eta: float = 0.3
    selection: Selection = Selection.top_k(20)
    max_occurrences: int = 2000
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_pre", "tau_post"):
            val = getattr(self, name)
            if isinstance(val, Mapping):
                object.__setattr__(self, name, Threshold(**val))
        if isinstance(self.selection, Mapping):
            object.__setattr__(self, "selection", Selection(**self.selection))
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.eta <= 1.0:
            raise DetectionConfigError("gamma and eta must lie in [0, 1]")
        if self.w < 1:
            raise DetectionConfigError("context radius w must be >= 1")
        if self.max_occurrences < 2:
            raise DetectionConfigError("max_occurrences must be >= 2")

    def to_dict(self) -> dict:
        return {
            "tau_pre": self.tau_pre.to_dict(),
            "tau_post": self.tau_post.to_dict(),
            "w": self.w,
            "gamma": self.gamma,
            "eta": self.eta,
            "selection": self.selection.to_dict(),
            "max_occurrences": self.max_occurrences,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectionConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class TokenAggregate:
    token_id: int
    freq: int
    mean_loss_pre: float
    mean_loss_post: float
    rock_score: float
    ph_count: int = 0
    rock_occurrences: int = 0
    ccr: float = 0.0
    rock_score_ctx: float = 0.0
    category: str = "other"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class OccurrenceRef(NamedTuple):
    trajectory_id: int
    t: int
    token_id: int
    loss_pre: float
    loss_post: float
    context_fingerprint: dict


@dataclass(frozen=True)
class DetectionReport:
    tokens: tuple[TokenAggregate, ...]
    rock_set: tuple[int, ...]
    densities: np.ndarray
    median_density: float
    config: DetectionConfig
    pre: str
    post: str
    resolved_tau_pre: float
    resolved_tau_post: float
    subsampled_tokens: tuple[int, ...] = ()
    trajectory_ids: tuple[int, ...] = field(default=())

    def aggregate(self, token_id: int) -> TokenAggregate:
        for agg in self.tokens:
            if agg.token_id == token_id:
                return agg
        raise KeyError(token_id)

    def ranking(self) -> list[int]:
        return [a.token_id for a in self.tokens]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "checkpoints": {"pre": self.pre, "post": self.post},
            "resolved_thresholds": {"tau_pre": self.resolved_tau_pre, "tau_post": self.resolved_tau_post},
            "subsample_cap": self.config.max_occurrences,
            "subsampled_tokens": list(self.subsampled_tokens),
            "rock_set": list(self.rock_set),
            "median_density": self.median_density,
            "densities": [float(d) for d in self.densities],
            "trajectory_ids": list(self.trajectory_ids),
            "tokens": [a.to_dict() for a in self.tokens],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectionReport":
        return cls(
            tokens=tuple(TokenAggregate(**a) for a in d["tokens"]),
            rock_set=tuple(d["rock_set"]),
            densities=np.asarray(d["densities"], dtype=float),
            median_density=d["median_density"],
            config=DetectionConfig.from_dict(d["config"]),
            pre=d["checkpoints"]["pre"],
            post=d["checkpoints"]["post"],
            resolved_tau_pre=d["resolved_thresholds"]["tau_pre"],
            resolved_tau_post=d["resolved_thresholds"]["tau_post"],
            subsampled_tokens=tuple(d.get("subsampled_tokens", ())),
            trajectory_ids=tuple(d.get("trajectory_ids", ())),
        )

    def table_csv(self, vocabulary=None) -> str:
        buf = io.StringIO()
        cols = list(TokenAggregate.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rank"] + cols + (["surface"] if vocabulary is not None else []))
        for rank, agg in enumerate(self.tokens, 1):
            row = [rank] + [getattr(agg, c) for c in cols]
            if vocabulary is not None:
                row.append(vocabulary[agg.token_id])
            writer.writerow(row)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# categories


def categorize_token(surface: str) -> str:
    s = surface.strip()
    if len(s) == 1 and s.isdigit():
        return "digit"
    if s in DISCOURSE_MARKERS:
        return "discourse_marker"
    if s in MATH_DELIMITERS or (s.startswith("\\") and len(s) > 1):
        return "math_delimiter"
    if not s or "\n" in surface or set(s) <= MARKDOWN_CHARS:
        return "markdown_whitespace"
    return "other"


# ---------------------------------------------------------------------------
# stage 1: aggregate scores


def _canonical(corpus: Corpus):
    """Flat arrays in (trajectory_id, position) order, independent of file order."""
    flat = corpus.flat
    traj_ids = np.array([t.trajectory_id for t in corpus.trajectories], dtype=np.int64)
    ids = traj_ids[flat.traj_index] if len(flat.tokens) else np.zeros(0, dtype=np.int64)
    order = np.lexsort((flat.positions, ids))
    return flat, ids, order


def aggregate_scores(corpus: Corpus, pre: str = "pre", post: str = "post", vocabulary=None) -> list[TokenAggregate]:
    """Frequency, mean losses and R(v) = mean post loss x frequency per token.

    Sorted by R(v) descending, ties by token id.
    """
    corpus.require(pre, post)
    flat, _, order = _canonical(corpus)
    tokens = flat.tokens[order]
    lpre = flat.losses[pre][order]
    lpost = flat.losses[post][order]
    vocab = vocabulary if vocabulary is not None else corpus.vocabulary
    V = max(vocab.size, int(tokens.max()) + 1 if len(tokens) else 0)
    freq = np.bincount(tokens, minlength=V)
    sum_pre = np.bincount(tokens, weights=lpre, minlength=V)
    sum_post = np.bincount(tokens, weights=lpost, minlength=V)
    out = []
    for v in np.flatnonzero(freq):
        n = int(freq[v])
        mpost = float(sum_post[v] / n)
        out.append(
            TokenAggregate(
                token_id=int(v),
                freq=n,
                mean_loss_pre=float(sum_pre[v] / n),
                mean_loss_post=mpost,
                rock_score=mpost * n,
                category=categorize_token(vocab[int(v)]) if int(v) < vocab.size else "other",
            )
        )
    out.sort(key=lambda a: (-a.rock_score, a.token_id))
    return out


# ---------------------------------------------------------------------------
# stage 2: persistent high-loss occurrences


def resolve_thresholds(corpus: Corpus, config: DetectionConfig, pre: str = "pre", post: str = "post") -> tuple[float, float]:
    flat = corpus.flat
    return config.tau_pre.resolve(flat.losses[pre]), config.tau_post.resolve(flat.losses[post])


def _ph_mask(corpus: Corpus, config: DetectionConfig, pre: str, post: str):
    corpus.require(pre, post)
    tp, tq = resolve_thresholds(corpus, config, pre, post)
    flat = corpus.flat
    return (flat.losses[pre] >= tp) & (flat.losses[post] >= tq), tp, tq


def fingerprint(tokens: Sequence[int], t: int, w: int) -> dict[int, int]:
    """Multiset of token ids within radius ``w`` of position ``t``, centre excluded."""
    window = list(tokens[max(0, t - w) : t]) + list(tokens[t + 1 : t + 1 + w])
    bag: dict[int, int] = {}
    for tok in window:
        bag[int(tok)] = bag.get(int(tok), 0) + 1
    return bag


def extract_ph_occurrences(
    corpus: Corpus, config: DetectionConfig = DetectionConfig(), pre: str = "pre", post: str = "post"
) -> list[OccurrenceRef]:
    mask, _, _ = _ph_mask(corpus, config, pre, post)
    flat = corpus.flat
    out = []
    for k in np.flatnonzero(mask):
        traj = corpus.trajectories[flat.traj_index[k]]
        t = int(flat.positions[k])
        out.append(
            OccurrenceRef(
                traj.trajectory_id,
                t,
                int(flat.tokens[k]),
                float(flat.losses[pre][k]),
                float(flat.losses[post][k]),
                fingerprint(traj.tokens, t, config.w),
            )
        )
    out.sort(key=lambda o: (o.trajectory_id, o.t))
    return out


# ---------------------------------------------------------------------------
# stage 3: context consistency


def context_similarity(a, b) -> float:
    """Generalized Jaccard of two fingerprints: sum of min counts over sum of max."""
    fa = a.context_fingerprint if hasattr(a, "context_fingerprint") else a
    fb = b.context_fingerprint if hasattr(b, "context_fingerprint") else b
    keys = set(fa) | set(fb)
    if not keys:
        return 1.0
    num = sum(min(fa.get(k, 0), fb.get(k, 0)) for k in keys)
    den = sum(max(fa.get(k, 0), fb.get(k, 0)) for k in keys)
    return num / den


def _level_matrix(bags: Sequence[Mapping[int, int]]) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Binary expansion: column (token, level) is set iff count(token) >= level.

    Then the inner product of two rows is the sum of min counts.
    """
    rows, cols = [], []
    col_of: dict[tuple[int, int], int] = {}
    sizes = np.zeros(len(bags))
    for i, bag in enumerate(bags):
        for tok, cnt in bag.items():
            sizes[i] += cnt
            for lvl in range(1, cnt + 1):
                c = col_of.setdefault((tok, lvl), len(col_of))
                rows.append(i)
                cols.append(c)
    mat = sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(bags), max(1, len(col_of)))
    )
    return mat, sizes


def similarity_matrix(bags: Sequence[Mapping[int, int]]) -> np.ndarray:
    mat, sizes = _level_matrix(bags)
    inter = (mat @ mat.T).toarray()
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return sim


def consistency_scores(ph_occs_of_v: Sequence, gamma: float) -> np.ndarray:
    """rho(o): share of the other occurrences whose context similarity is >= gamma.

    A lone occurrence scores 0.
    """
    n = len(ph_occs_of_v)
    if n <= 1:
        return np.zeros(n)
    bags = [o.context_fingerprint if hasattr(o, "context_fingerprint") else o for o in ph_occs_of_v]
    sim = similarity_matrix(bags)
    hits = (sim >= gamma).sum(axis=1) - 1  # the diagonal always matches
    return hits / (n - 1)


# ---------------------------------------------------------------------------
# composition


def _select(ranked: Sequence[TokenAggregate], selection: Selection) -> tuple[int, ...]:
    if selection.kind == "threshold":
        return tuple(a.token_id for a in ranked if a.rock_score_ctx >= selection.value)
    positive = [a for a in ranked if a.rock_score_ctx > 0]
    return tuple(a.token_id for a in positive[: int(selection.value)])


def rock_densities(corpus: Corpus, rock_set: Iterable[int]) -> np.ndarray:
    rocks = np.array(sorted(set(rock_set)), dtype=np.int64)
    out = np.zeros(len(corpus))
    for i, traj in enumerate(corpus.trajectories):
        if len(traj):
            out[i] = float(np.isin(traj.tokens, rocks).mean())
    return out


class _TokenPass(NamedTuple):
    ph_count: int
    sample: np.ndarray  # flat indices of the (possibly subsampled) PH occurrences
    rho: np.ndarray
    bags: list


def _consistency_pass(corpus: Corpus, config: DetectionConfig, pre: str, post: str):
    mask, tp, tq = _ph_mask(corpus, config, pre, post)
    flat, _, order = _canonical(corpus)
    ph_idx = order[mask[order]]  # canonical order restricted to PH occurrences
    ph_tokens = flat.tokens[ph_idx]
    out: dict[int, _TokenPass] = {}
    for v in np.unique(ph_tokens):
        occ = ph_idx[ph_tokens == v]
        sample = occ
        if len(occ) > config.max_occurrences:
            rng = substream(config.seed, "ph-subsample", int(v))
            sample = occ[np.sort(rng.choice(len(occ), size=config.max_occurrences, replace=False))]
        bags = [
            fingerprint(corpus.trajectories[flat.traj_index[k]].tokens, int(flat.positions[k]), config.w)
            for k in sample
        ]
        out[int(v)] = _TokenPass(len(occ), sample, consistency_scores(bags, config.gamma), bags)
    return out, tp, tq


def rock_occurrences(
    corpus: Corpus, config: DetectionConfig = DetectionConfig(), pre: str = "pre", post: str = "post"
) -> dict[int, list[OccurrenceRef]]:
    """Retained occurrences (PH and rho >= eta) per token.

    When a token's PH set was subsampled only the sampled occurrences can
    be classified, so only those are returned.
    """
    passes, _, _ = _consistency_pass(corpus, config, pre, post)
    flat = corpus.flat
    out = {}
    for v, tp in passes.items():
        keep = np.flatnonzero(tp.rho >= config.eta) if len(tp.sample) > 1 else []
        refs = []
        for j in keep:
            k = tp.sample[j]
            refs.append(
                OccurrenceRef(
                    corpus.trajectories[flat.traj_index[k]].trajectory_id,
                    int(flat.positions[k]),
                    v,
                    float(flat.losses[pre][k]),
                    float(flat.losses[post][k]),
                    tp.bags[j],
                )
            )
        if refs:
            out[v] = refs
    return out


def select_rock_tokens(
    corpus: Corpus, config: DetectionConfig = DetectionConfig(), pre: str = "pre", post: str = "post"
) -> DetectionReport:
    """Run the three stages and pick the rock set.

    Subsampled tokens have their retained count scaled back up to the full
    PH set size.
    """
    base = aggregate_scores(corpus, pre, post)
    passes, tp, tq = _consistency_pass(corpus, config, pre, post)
    subsampled = []
    updated = []
    for agg in base:
        tpass = passes.get(agg.token_id)
        ph_count = rock_occ = 0
        if tpass is not None:
            ph_count = tpass.ph_count
            n = len(tpass.sample)
            hits = int(np.sum(tpass.rho >= config.eta)) if n > 1 else 0
            if n < ph_count:
                subsampled.append(agg.token_id)
                rock_occ = min(ph_count, int(round(hits * ph_count / n)))
            else:
                rock_occ = hits
        ccr = rock_occ / agg.freq
        updated.append(
            TokenAggregate(
                token_id=agg.token_id,
                freq=agg.freq,
                mean_loss_pre=agg.mean_loss_pre,
                mean_loss_post=agg.mean_loss_post,
                rock_score=agg.rock_score,
                ph_count=ph_count,
                rock_occurrences=rock_occ,
                ccr=ccr,
                rock_score_ctx=agg.rock_score * ccr,
                category=agg.category,
            )
        )
    updated.sort(key=lambda a: (-a.rock_score_ctx, -a.rock_score, a.token_id))
    rock_set = _select(updated, config.selection)
    tids = [t.trajectory_id for t in corpus.trajectories]
    canon = sorted(range(len(corpus)), key=lambda i: tids[i])
    dens = rock_densities(corpus, rock_set)[canon]
    return DetectionReport(
        tokens=tuple(updated),
        rock_set=rock_set,
        densities=dens,
        median_density=float(np.median(dens)) if len(dens) else 0.0,
        config=config,
        pre=pre,
        post=post,
        resolved_tau_pre=tp,
        resolved_tau_post=tq,
        subsampled_tokens=tuple(sorted(subsampled)),
        trajectory_ids=tuple(tids[i] for i in canon),
    )


# ---------------------------------------------------------------------------
# controls


def freq_bucket(freq: int) -> int:
    return int(math.floor(math.log2(freq))) if freq > 0 else -1


def freq_matched_controls(
    report: DetectionReport,
    excluded: Iterable[int] = (),
    seed: int = 0,
    rock_set: Iterable[int] | None = None,
) -> tuple[int, ...]:
    """One control per rock token, drawn without replacement from the same
    log2-frequency bucket among non-rock, non-excluded tokens."""
    rocks = tuple(report.rock_set if rock_set is None else rock_set)
    if not rocks:
        return ()
    freq = {a.token_id: a.freq for a in report.tokens}
    banned = set(rocks) | set(excluded)
    need: dict[int, int] = {}
    for v in rocks:
        b = freq_bucket(freq.get(v, 0))
        need[b] = need.get(b, 0) + 1
    out: list[int] = []
    for b in sorted(need):
        pool = sorted(t for t, f in freq.items() if t not in banned and freq_bucket(f) == b)
        if len(pool) < need[b]:
            raise ControlSamplingError(b, need[b], len(pool))
        rng = substream(seed, "controls", b)
        picks = rng.choice(len(pool), size=need[b], replace=False)
        out.extend(pool[i] for i in sorted(picks))
    return tuple(sorted(out))
