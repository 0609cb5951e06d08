"""Per-position loss weights around rock tokens.

A mask gives weight ``lam`` to every position holding a rock token or lying
inside a rock window, and 1 elsewhere.  ``lam = 1`` is plain training,
``lam = 0`` freezes rocks and their windows, and the control regime freezes
random windows matched to the rock windows in length and centre-token
frequency.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .detect import DetectionConfig, DetectionReport, freq_bucket, rock_occurrences
from .rng import derive_seed, substream
from .trace import Corpus

log = logging.getLogger(__name__)

REGIMES = ("baseline", "rock_freeze", "freq_matched_random")


class MaskError(ValueError):
    pass


class WindowSamplingError(RuntimeError):
    def __init__(self, length: int, bucket: int, needed: int, placed: int):
        super().__init__(
            f"could only place {placed} of {needed} control windows of length {length} "
            f"with centre-token frequency bucket {bucket}"
        )
        self.length = length
        self.bucket = bucket


@dataclass(frozen=True)
class WindowSet:
    """Inclusive position intervals per trajectory id, sorted and non-overlapping."""

    intervals: Mapping[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    @classmethod
    def from_points(cls, points: Mapping[int, Iterable[int]], radius: int, lengths: Mapping[int, int]) -> "WindowSet":
        out = {}
        for tid, ts in points.items():
            n = lengths[tid]
            spans = sorted((max(0, t - radius), min(n - 1, t + radius)) for t in ts)
            if spans:
                out[tid] = merge_intervals(spans)
        return cls(out)

    def __iter__(self):
        for tid in sorted(self.intervals):
            for s, e in self.intervals[tid]:
                yield tid, s, e

    def __len__(self) -> int:
        return sum(len(v) for v in self.intervals.values())

    def lengths(self) -> list[int]:
        return [e - s + 1 for _, s, e in self]

    def covered(self, trajectory_id: int) -> set[int]:
        return {t for s, e in self.intervals.get(trajectory_id, ()) for t in range(s, e + 1)}

    def total_covered(self) -> int:
        return sum(self.lengths())

    def to_dict(self) -> dict:
        return {str(tid): [list(iv) for iv in ivs] for tid, ivs in sorted(self.intervals.items())}


def merge_intervals(spans: Sequence[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    """Merge intervals that share at least one position."""
    merged: list[list[int]] = []
    for s, e in sorted(spans):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return tuple((s, e) for s, e in merged)


@dataclass(frozen=True)
class WeightMask:
    trajectory_id: int
    weights: np.ndarray
    regime: str
    lam: float
    masked_fraction: float

    def to_record(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "regime": self.regime,
            "lambda": self.lam,
            "length": int(len(self.weights)),
            "rle": run_length_encode(self.weights),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "WeightMask":
        w = run_length_decode(rec["rle"])
        if len(w) != rec["length"]:
            raise MaskError(f"trajectory {rec['trajectory_id']}: run lengths do not add up to length")
        lam = float(rec["lambda"])
        frac = float(np.mean(w != 1.0)) if lam != 1.0 and len(w) else 0.0
        return cls(int(rec["trajectory_id"]), w, rec["regime"], lam, frac)


def run_length_encode(weights: Sequence[float]) -> list[list]:
    out: list[list] = []
    for x in np.asarray(weights, dtype=float).tolist():
        if out and out[-1][0] == x:
            out[-1][1] += 1
        else:
            out.append([x, 1])
    return out


def run_length_decode(runs: Sequence[Sequence]) -> np.ndarray:
    if not runs:
        return np.zeros(0)
    return np.concatenate([np.full(int(n), float(v)) for v, n in runs])


def _lengths(corpus: Corpus) -> dict[int, int]:
    return {t.trajectory_id: len(t) for t in corpus.trajectories}


def rock_windows(
    corpus: Corpus,
    detection: DetectionReport,
    radius: int | None = None,
    occurrences: Mapping[int, Sequence] | None = None,
) -> WindowSet:
    """Windows of ``radius`` (default: the detection context radius) around
    every retained occurrence of a rock-set token, merged per trajectory."""
    r = detection.config.w if radius is None else radius
    if r < 0:
        raise MaskError("radius must be non-negative")
    if occurrences is None:
        occurrences = rock_occurrences(corpus, detection.config, detection.pre, detection.post)
    points: dict[int, list[int]] = {}
    for v in detection.rock_set:
        for occ in occurrences.get(v, ()):
            points.setdefault(occ.trajectory_id, []).append(occ.t)
    return WindowSet.from_points(points, r, _lengths(corpus))


def token_windows(corpus: Corpus, tokens: Iterable[int], radius: int) -> WindowSet:
    """Windows around every occurrence of the given tokens (no detection needed)."""
    wanted = np.array(sorted(set(int(v) for v in tokens)), dtype=np.int64)
    points = {}
    for traj in corpus.trajectories:
        hits = np.flatnonzero(np.isin(traj.tokens, wanted))
        if hits.size:
            points[traj.trajectory_id] = hits.tolist()
    return WindowSet.from_points(points, radius, _lengths(corpus))


def build_mask(
    corpus: Corpus,
    rock_set: Iterable[int],
    windows: WindowSet,
    lam: float,
    regime: str = "rock_freeze",
) -> list[WeightMask]:
    if not 0.0 <= lam <= 1.0:
        raise MaskError(f"lambda must lie in [0, 1], got {lam}")
    if regime not in REGIMES:
        raise MaskError(f"unknown regime {regime!r}")
    rocks = np.array(sorted(set(int(v) for v in rock_set)), dtype=np.int64)
    out = []
    for traj in corpus.trajectories:
        hit = np.isin(traj.tokens, rocks)
        for s, e in windows.intervals.get(traj.trajectory_id, ()):
            hit[s : e + 1] = True
        w = np.where(hit, lam, 1.0)
        frac = float(hit.mean()) if len(hit) else 0.0
        out.append(WeightMask(traj.trajectory_id, w, regime, float(lam), frac))
    return out


def baseline_mask(corpus: Corpus) -> list[WeightMask]:
    return build_mask(corpus, (), WindowSet(), 1.0, regime="baseline")


def freq_matched_random_windows(
    corpus: Corpus,
    reference: WindowSet,
    rock_set: Iterable[int],
    seed: int = 0,
    strict: bool = True,
) -> WindowSet:
    """Control windows matching the reference windows one for one in length
    and in the log2-frequency bucket of the centre token.

    Controls avoid the reference windows and each other, and never centre on
    a rock token.  Requests are grouped by (length, bucket); each group draws
    from a shuffled list of every currently valid start.  With
    ``strict=False`` unplaceable requests are dropped (logged at debug
    level) instead of raising.
    """
    if len(reference) == 0:
        return WindowSet()
    flat = corpus.flat
    tokens = flat.tokens
    N = len(tokens)
    freq = np.bincount(tokens)
    bucket_of = np.array([freq_bucket(int(f)) for f in freq])
    rocks = set(int(v) for v in rock_set)
    is_rock = np.isin(tokens, list(rocks)) if rocks else np.zeros(N, dtype=bool)
    traj_ids = np.array([t.trajectory_id for t in corpus.trajectories])
    index_of = {int(tid): i for i, tid in enumerate(traj_ids)}
    lengths = np.diff(flat.offsets)
    occupied = np.zeros(N, dtype=bool)
    requests: dict[tuple[int, int], int] = {}
    for tid, s, e in reference:
        i = index_of[tid]
        base = flat.offsets[i]
        occupied[base + s : base + e + 1] = True
        key = (e - s + 1, int(bucket_of[tokens[base + (s + e) // 2]]))
        requests[key] = requests.get(key, 0) + 1
    placed: dict[int, list[tuple[int, int]]] = {}
    for (L, b), need in sorted(requests.items(), key=lambda kv: (-kv[0][0], kv[0][1])):
        rng = substream(seed, "control-windows", L, b)
        cum = np.concatenate([[0], np.cumsum(occupied)])
        starts = np.arange(max(0, N - L + 1))
        ok = (cum[starts + L] - cum[starts]) == 0
        ok &= flat.positions[starts] + L <= lengths[flat.traj_index[starts]]
        centre = starts + (L - 1) // 2
        ok &= (bucket_of[tokens[centre]] == b) & ~is_rock[centre]
        cand = starts[ok]
        got = 0
        for g in cand[rng.permutation(len(cand))]:
            if got == need:
                break
            if occupied[g : g + L].any():
                continue
            occupied[g : g + L] = True
            i = int(flat.traj_index[g])
            s = int(flat.positions[g])
            placed.setdefault(int(traj_ids[i]), []).append((s, s + L - 1))
            got += 1
        if got < need:
            if strict:
                raise WindowSamplingError(L, b, need, got)
            log.debug("placed %d of %d control windows (length %d, bucket %d)", got, need, L, b)
    return WindowSet({tid: tuple(sorted(v)) for tid, v in placed.items()})


def window_histograms(corpus: Corpus, windows: WindowSet) -> tuple[dict[int, int], dict[int, int]]:
    """(length histogram, centre-token log2-frequency bucket histogram)."""
    freq = np.bincount(corpus.flat.tokens)
    by_id = {t.trajectory_id: t for t in corpus.trajectories}
    lengths: dict[int, int] = {}
    buckets: dict[int, int] = {}
    for tid, s, e in windows:
        lengths[e - s + 1] = lengths.get(e - s + 1, 0) + 1
        b = freq_bucket(int(freq[by_id[tid].tokens[(s + e) // 2]]))
        buckets[b] = buckets.get(b, 0) + 1
    return lengths, buckets


class WeightedLoss(NamedTuple):
    total: float
    per_trajectory: tuple[float, ...]
    active_term_count: int


def plain_loss(corpus: Corpus, checkpoint: str) -> float:
    corpus.require(checkpoint)
    return math.fsum(float(x) for t in corpus.trajectories for x in t.losses[checkpoint])


def weighted_loss(corpus: Corpus, masks: Sequence[WeightMask], checkpoint: str) -> WeightedLoss:
    """Sum of weight x loss.  Zero-weight positions are skipped outright and do
    not count as active terms.  Sums are exactly rounded (``math.fsum``)."""
    corpus.require(checkpoint)
    by_id = {m.trajectory_id: m for m in masks}
    per = []
    terms = []
    active = 0
    for traj in corpus.trajectories:
        m = by_id.get(traj.trajectory_id)
        if m is None:
            raise MaskError(f"no mask for trajectory {traj.trajectory_id}")
        if len(m.weights) != len(traj):
            raise MaskError(
                f"trajectory {traj.trajectory_id}: mask length {len(m.weights)} != {len(traj)} positions"
            )
        keep = m.weights != 0
        prod = (m.weights[keep] * traj.losses[checkpoint][keep]).tolist()
        active += int(keep.sum())
        per.append(math.fsum(prod))
        terms.extend(prod)
    return WeightedLoss(math.fsum(terms), tuple(per), active)


def write_masks(masks: Sequence[WeightMask], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in masks:
            fh.write(json.dumps(m.to_record(), separators=(",", ":")))
            fh.write("\n")


def read_masks(path: str | PathLike) -> list[WeightMask]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(WeightMask.from_record(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# online mask sources for the simulator trainer


class RockFreezeSource:
    """Mask source freezing rock tokens and windows of ``radius`` around them
    in each freshly sampled batch."""

    def __init__(self, rock_set: Iterable[int], radius: int = 0, lam: float = 0.0):
        self.rock_set = tuple(sorted(set(int(v) for v in rock_set)))
        self.radius = radius
        self.lam = lam

    def __call__(self, batch: Corpus) -> list[np.ndarray]:
        win = token_windows(batch, self.rock_set, self.radius) if self.radius > 0 else WindowSet()
        return [m.weights for m in build_mask(batch, self.rock_set, win, self.lam)]


class FreqMatchedSource:
    """Mask source freezing random windows matched to each batch's rock windows."""

    def __init__(self, rock_set: Iterable[int], radius: int = 0, lam: float = 0.0, seed: int = 0):
        self.rock_set = tuple(sorted(set(int(v) for v in rock_set)))
        self.radius = radius
        self.lam = lam
        self.seed = seed
        self.calls = 0
        self.requested = 0  # positions in the reference windows, summed over batches
        self.placed = 0

    def __call__(self, batch: Corpus) -> list[np.ndarray]:
        self.calls += 1
        ref = token_windows(batch, self.rock_set, self.radius)
        ctrl = freq_matched_random_windows(batch, ref, self.rock_set, seed=derive_seed(self.seed, self.calls), strict=False)
        self.requested += ref.total_covered()
        self.placed += ctrl.total_covered()
        return [m.weights for m in build_mask(batch, (), ctrl, self.lam, regime="freq_matched_random")]
