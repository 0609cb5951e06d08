"""Trace data model and the on-disk trace / vocabulary formats.

A trace file holds one trajectory per line (UTF-8 JSON).  Every record
carries ``schema``, ``trajectory_id``, ``prompt_id``, ``tokens`` and a
``losses`` object keyed by checkpoint name; ``dists`` is optional and holds
truncated student/teacher distributions per checkpoint::

    {"schema": 1, "trajectory_id": 0, "prompt_id": 3, "tokens": [4, 9],
     "losses": {"pre": [0.5, 0.1], "post": [0.4, 0.0]},
     "dists": {"pre": {"student": {"ids": [[..]], "probs": [[..]], "tail": [..]},
                       "teacher": {...}}}}

Floats are written in shortest round-trip form after rounding to 9
significant digits, so identical corpora serialize to identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

SCHEMA_VERSION = 1
PROB_SUM_TOL = 1e-6


class TraceError(Exception):
    """Base class for trace-format problems."""


class TraceParseError(TraceError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TraceValidationError(TraceError):
    def __init__(self, trajectory_id, field_name: str, message: str):
        super().__init__(f"trajectory {trajectory_id}: field '{field_name}': {message}")
        self.trajectory_id = trajectory_id
        self.field = field_name


def round9(x: float) -> float:
    """Round to 9 significant digits (the serialization precision)."""
    return float(format(x, ".9g"))


def _round_list(values) -> list:
    return [float(format(v, ".9g")) for v in np.asarray(values, dtype=float).ravel().tolist()]


def quantize(values) -> np.ndarray:
    """Array version of :func:`round9`, preserving shape."""
    arr = np.asarray(values, dtype=float)
    return np.array(_round_list(arr), dtype=float).reshape(arr.shape)


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class TruncatedDist:
    """Top-k distribution with the omitted mass lumped into ``tail_mass``."""

    entries: tuple[tuple[int, float], ...]
    tail_mass: float = 0.0

    def validate(self) -> None:
        ids = [i for i, _ in self.entries]
        probs = [p for _, p in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate token ids in distribution")
        if any(p <= 0 for p in probs):
            raise ValueError("probabilities must be positive")
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise ValueError("entries must be sorted by descending probability")
        if not 0.0 <= self.tail_mass <= 1.0:
            raise ValueError("tail_mass outside [0, 1]")
        total = math.fsum(probs) + self.tail_mass
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"mass sums to {total!r}")

    def dense(self, vocab_size: int) -> np.ndarray:
        """Full vector; tail mass is spread uniformly over omitted ids."""
        out = np.zeros(vocab_size)
        ids = np.array([i for i, _ in self.entries], dtype=np.int64)
        out[ids] = [p for _, p in self.entries]
        n_omitted = vocab_size - len(ids)
        if n_omitted > 0 and self.tail_mass > 0:
            mask = np.ones(vocab_size, dtype=bool)
            mask[ids] = False
            out[mask] = self.tail_mass / n_omitted
        return out


@dataclass(frozen=True, eq=False)
class DistBlock:
    """Per-position truncated distributions for one model, stored as arrays.

    ``ids`` and ``probs`` have shape (T, k); ``tail`` has shape (T,).
    """

    ids: np.ndarray
    probs: np.ndarray
    tail: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, t: int) -> TruncatedDist:
        return TruncatedDist(
            tuple(zip(self.ids[t].tolist(), self.probs[t].tolist())), float(self.tail[t])
        )

    @classmethod
    def from_dense(cls, probs: np.ndarray, top_k: int | None = None) -> "DistBlock":
        """Sort each row descending and keep the top ``k`` positive entries."""
        probs = np.asarray(probs, dtype=float)
        T, V = probs.shape
        k = V if top_k is None else min(top_k, V)
        order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
        kept = np.take_along_axis(probs, order, axis=1)
        tail = np.clip(1.0 - kept.sum(axis=1), 0.0, 1.0)
        return cls(order.astype(np.int64), kept, tail)

    def dense(self, vocab_size: int) -> np.ndarray:
        T, k = self.ids.shape
        out = np.zeros((T, vocab_size))
        if T == 0:
            return out
        rows = np.repeat(np.arange(T), k)
        out[rows, self.ids.ravel()] = self.probs.ravel()
        n_omitted = vocab_size - k
        if n_omitted > 0:
            spread = (self.tail / n_omitted)[:, None]
            covered = np.zeros((T, vocab_size), dtype=bool)
            covered[rows, self.ids.ravel()] = True
            out = np.where(covered, out, spread)
        return out

    def validate(self) -> None:
        if self.ids.shape != self.probs.shape or self.tail.shape != (self.ids.shape[0],):
            raise ValueError("inconsistent array shapes")
        if np.any(self.probs <= 0):
            raise ValueError("probabilities must be positive")
        if np.any(np.diff(self.probs, axis=1) > 0):
            raise ValueError("entries must be sorted by descending probability")
        if np.any((self.tail < 0) | (self.tail > 1)):
            raise ValueError("tail_mass outside [0, 1]")
        totals = self.probs.sum(axis=1) + self.tail
        if np.any(np.abs(totals - 1.0) > PROB_SUM_TOL):
            raise ValueError("probability mass does not sum to 1")
        srt = np.sort(self.ids, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ValueError("duplicate token ids in distribution")


class DistPair(NamedTuple):
    student: DistBlock
    teacher: DistBlock


# ---------------------------------------------------------------------------
# trajectories, vocabulary, corpus


@dataclass(frozen=True, eq=False)
class TrajectoryTrace:
    trajectory_id: int
    prompt_id: int
    tokens: np.ndarray
    losses: Mapping[str, np.ndarray]
    dists: Mapping[str, DistPair] | None = None

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        losses = {}
        for name, vals in self.losses.items():
            arr = np.asarray(vals, dtype=float)
            arr.setflags(write=False)
            losses[name] = arr
        object.__setattr__(self, "losses", losses)

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        tid = self.trajectory_id
        if not isinstance(tid, (int, np.integer)) or tid < 0:
            raise TraceValidationError(tid, "trajectory_id", "must be an unsigned integer")
        if not isinstance(self.prompt_id, (int, np.integer)) or self.prompt_id < 0:
            raise TraceValidationError(tid, "prompt_id", "must be an unsigned integer")
        if self.tokens.ndim != 1 or np.any(self.tokens < 0):
            raise TraceValidationError(tid, "tokens", "must be a sequence of unsigned ids")
        if not self.losses:
            raise TraceValidationError(tid, "losses", "at least one checkpoint required")
        for name, vals in self.losses.items():
            if not isinstance(name, str):
                raise TraceValidationError(tid, "losses", "checkpoint names must be strings")
            if vals.shape != self.tokens.shape:
                raise TraceValidationError(
                    tid, f"losses.{name}", f"length {vals.size} != tokens length {self.tokens.size}"
                )
            if not np.all(np.isfinite(vals)) or np.any(vals < 0):
                raise TraceValidationError(tid, f"losses.{name}", "values must be finite and >= 0")
        if self.dists:
            for name, pair in self.dists.items():
                if name not in self.losses:
                    raise TraceValidationError(tid, f"dists.{name}", "no loss sequence for checkpoint")
                for side, block in zip(("student", "teacher"), pair):
                    if len(block) != len(self.tokens):
                        raise TraceValidationError(
                            tid, f"dists.{name}.{side}", "must cover exactly the loss positions"
                        )
                    try:
                        block.validate()
                    except ValueError as exc:
                        raise TraceValidationError(tid, f"dists.{name}.{side}", str(exc)) from None

    def allclose(self, other: "TrajectoryTrace", rtol: float = 1e-9) -> bool:
        if (self.trajectory_id, self.prompt_id) != (other.trajectory_id, other.prompt_id):
            return False
        if not np.array_equal(self.tokens, other.tokens):
            return False
        if list(self.losses) != list(other.losses):
            return False
        for k in self.losses:
            if not np.allclose(self.losses[k], other.losses[k], rtol=rtol, atol=0):
                return False
        if bool(self.dists) != bool(other.dists):
            return False
        if self.dists:
            if list(self.dists) != list(other.dists):
                return False
            for k, pair in self.dists.items():
                for a, b in zip(pair, other.dists[k]):
                    if not np.array_equal(a.ids, b.ids):
                        return False
                    if not np.allclose(a.probs, b.probs, rtol=rtol, atol=0):
                        return False
                    if not np.allclose(a.tail, b.tail, rtol=rtol, atol=1e-12):
                        return False
        return True


@dataclass(frozen=True)
class Vocabulary:
    id_to_string: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_string)

    def __getitem__(self, token_id: int) -> str:
        return self.id_to_string[token_id]

    def __len__(self) -> int:
        return self.size


class OccurrencePair(NamedTuple):
    trajectory_id: int
    t: int
    token_id: int
    loss_pre: float
    loss_post: float


@dataclass(frozen=True, eq=False)
class Corpus:
    trajectories: tuple[TrajectoryTrace, ...]
    vocabulary: Vocabulary
    checkpoints: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))

    def __len__(self) -> int:
        return len(self.trajectories)

    def validate(self) -> None:
        seen = set()
        for traj in self.trajectories:
            traj.validate()
            if traj.trajectory_id in seen:
                raise TraceValidationError(traj.trajectory_id, "trajectory_id", "duplicate id")
            seen.add(traj.trajectory_id)
            if traj.tokens.size and traj.tokens.max() >= self.vocabulary.size:
                raise TraceValidationError(
                    traj.trajectory_id, "tokens", f"id >= vocabulary size {self.vocabulary.size}"
                )
            if set(traj.losses) != set(self.checkpoints):
                raise TraceValidationError(
                    traj.trajectory_id, "losses", f"checkpoints {sorted(traj.losses)} != {sorted(self.checkpoints)}"
                )

    def require(self, *checkpoints: str) -> None:
        for name in checkpoints:
            if name not in self.checkpoints:
                raise KeyError(f"checkpoint {name!r} not in corpus (have {list(self.checkpoints)})")

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return Corpus(tuple(self.trajectories[i] for i in indices), self.vocabulary, self.checkpoints)

    def allclose(self, other: "Corpus", rtol: float = 1e-9) -> bool:
        return (
            self.vocabulary == other.vocabulary
            and self.checkpoints == other.checkpoints
            and len(self) == len(other)
            and all(a.allclose(b, rtol) for a, b in zip(self.trajectories, other.trajectories))
        )

    @cached_property
    def flat(self) -> "FlatCorpus":
        return FlatCorpus.build(self)


@dataclass(frozen=True, eq=False)
class FlatCorpus:
    """Concatenated per-position arrays; positions follow trajectory order."""

    tokens: np.ndarray
    traj_index: np.ndarray
    positions: np.ndarray
    offsets: np.ndarray
    losses: dict[str, np.ndarray]

    @classmethod
    def build(cls, corpus: Corpus) -> "FlatCorpus":
        lengths = np.array([len(t) for t in corpus.trajectories], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        if len(corpus.trajectories):
            tokens = np.concatenate([t.tokens for t in corpus.trajectories])
            losses = {
                c: np.concatenate([t.losses[c] for t in corpus.trajectories]) for c in corpus.checkpoints
            }
        else:
            tokens = np.zeros(0, dtype=np.int64)
            losses = {c: np.zeros(0) for c in corpus.checkpoints}
        traj_index = np.repeat(np.arange(len(lengths)), lengths)
        positions = np.arange(offsets[-1]) - offsets[traj_index]
        return cls(tokens, traj_index, positions, offsets, losses)


# ---------------------------------------------------------------------------
# serialization


def _block_to_json(block: DistBlock) -> dict:
    return {
        "ids": block.ids.tolist(),
        "probs": [_round_list(row) for row in block.probs],
        "tail": _round_list(block.tail),
    }


def _block_from_json(obj) -> DistBlock:
    ids = np.asarray(obj["ids"], dtype=np.int64)
    probs = np.asarray(obj["probs"], dtype=float)
    tail = np.asarray(obj["tail"], dtype=float)
    if ids.ndim != 2:
        ids = ids.reshape(len(tail), -1)
        probs = probs.reshape(len(tail), -1)
    return DistBlock(ids, probs, tail)


def trajectory_to_record(traj: TrajectoryTrace, checkpoints: Sequence[str] | None = None) -> dict:
    names = list(checkpoints) if checkpoints else list(traj.losses)
    rec = {
        "schema": SCHEMA_VERSION,
        "trajectory_id": int(traj.trajectory_id),
        "prompt_id": int(traj.prompt_id),
        "tokens": traj.tokens.tolist(),
        "losses": {name: _round_list(traj.losses[name]) for name in names},
    }
    if traj.dists:
        rec["dists"] = {
            name: {"student": _block_to_json(pair.student), "teacher": _block_to_json(pair.teacher)}
            for name, pair in ((n, traj.dists[n]) for n in names if n in traj.dists)
        }
    return rec


def trajectory_from_record(rec: dict) -> TrajectoryTrace:
    dists = None
    if rec.get("dists"):
        dists = {
            name: DistPair(_block_from_json(d["student"]), _block_from_json(d["teacher"]))
            for name, d in rec["dists"].items()
        }
    return TrajectoryTrace(
        trajectory_id=rec["trajectory_id"],
        prompt_id=rec["prompt_id"],
        tokens=rec["tokens"],
        losses=rec["losses"],
        dists=dists,
    )


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def iter_trace_records(path: str | PathLike) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(line_no, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceParseError(line_no, "record is not an object")
            missing = [k for k in ("schema", "trajectory_id", "prompt_id", "tokens", "losses") if k not in rec]
            if missing:
                raise TraceParseError(line_no, f"missing fields {missing}")
            if rec["schema"] != SCHEMA_VERSION:
                raise TraceParseError(line_no, f"unsupported schema {rec['schema']!r}")
            yield line_no, rec


def load_vocabulary(path: str | PathLike) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    size = doc.get("size")
    if not isinstance(size, int) or size < 0:
        raise TraceError(f"{path}: vocabulary needs a non-negative integer 'size'")
    strings = []
    for i in range(size):
        key = str(i)
        if key not in doc:
            raise TraceError(f"{path}: vocabulary ids must be dense, missing {i}")
        strings.append(doc[key])
    extra = set(doc) - {"size"} - {str(i) for i in range(size)}
    if extra:
        raise TraceError(f"{path}: unexpected vocabulary keys {sorted(extra)[:5]}")
    return Vocabulary(tuple(strings))


def write_vocabulary(vocab: Vocabulary, path: str | PathLike) -> None:
    doc = {"size": vocab.size}
    doc.update({str(i): s for i, s in enumerate(vocab.id_to_string)})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_corpus(trace_path: str | PathLike, vocab_path: str | PathLike) -> Corpus:
    vocab = load_vocabulary(vocab_path)
    trajectories = []
    checkpoints: tuple[str, ...] | None = None
    for line_no, rec in iter_trace_records(trace_path):
        try:
            traj = trajectory_from_record(rec)
        except (TypeError, ValueError, KeyError) as exc:
            raise TraceParseError(line_no, f"bad field value ({exc})") from None
        traj.validate()
        if checkpoints is None:
            checkpoints = tuple(traj.losses)
        trajectories.append(traj)
    corpus = Corpus(tuple(trajectories), vocab, checkpoints or ())
    corpus.validate()
    return corpus


def write_corpus(corpus: Corpus, trace_path: str | PathLike) -> None:
    corpus.validate()
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in corpus.trajectories:
            fh.write(dumps_record(trajectory_to_record(traj, corpus.checkpoints)))
            fh.write("\n")


def align_checkpoints(corpus: Corpus, pre: str, post: str) -> list[OccurrencePair]:
    corpus.require(pre, post)
    out = []
    for traj in corpus.trajectories:
        lp, lq = traj.losses[pre], traj.losses[post]
        for t, tok in enumerate(traj.tokens.tolist()):
            out.append(OccurrencePair(traj.trajectory_id, t, tok, float(lp[t]), float(lq[t])))
    return out
