"""Desk-scale on-policy distillation laboratory.

A tabular teacher and student share the same context -> next-token table
layout.  Contexts are the last ``markov_order`` tokens, except that the
position right after the answer separator is keyed by the prompt operands
(that is the only place the task needs them).  Trajectories follow a toy
arithmetic format: the prompt ``d1 + d2 =`` is followed by a free-form body,
then ``#### <digit> <end>``; a completion is correct iff it ends with the
separator, the digit ``(d1 + d2) mod 10`` and ``<end>``.

Planted rocks are student logit offsets on a token in every context where
that token is grammatical (the rows keyed by its cue tokens).  A large
offset collapses the student onto the token there; reverse KL is nearly
flat around such a collapsed row, which is what makes the mismatch persist.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .rng import substream
from .trace import Corpus, DistBlock, DistPair, TrajectoryTrace, Vocabulary, quantize

log = logging.getLogger(__name__)

DIGITS = tuple(str(d) for d in range(10))
OP, EQ, SEP, END = "+", "=", "####", "<end>"
MATH = ("$", "\\", "{", "}", "frac", "^", "(", ")", "$$")
LAYOUT = ("\n", "\n\n", "###", "---", ":\n\n", "**")
DISCOURSE = ("So", "Let", "We", "But", "Now", "Wait", "Then", "Since", "This")
CONTENT = (
    " the", " of", " is", " sum", " add", " number", " value", " get", " carry",
    " digit", " result", " find", " check", " first", " right", " as", " between",
    " a", " b", " x", " total", " must",
)
NAMED_TOKENS = DIGITS + (OP, EQ, SEP, END) + MATH + LAYOUT + DISCOURSE + CONTENT
SUPPORT_FLOOR = 1e-12
DEFAULT_PLANTED = ("$", "\\", "{", "frac", "^", "\n\n", "###", "**", "So", "Wait", "Let", "Then")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" or "adaptive_moment"
    lr: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SimConfig:
    vocab_size: int = 64
    markov_order: int = 2
    zipf_exponent: float = 1.2
    planted_rock_tokens: tuple[int, ...] | None = None  # None -> DEFAULT_PLANTED ids
    planted_offset: float = 20.0
    planted_teacher_prob: float = 0.35
    rocks_per_phrase: int = 3
    phrases_per_group: int = 2
    phrase_length: int = 12
    phrase_prob: float = 0.95
    planted_pillar_token: int | None = None  # None -> the "####" separator
    student_noise: float = 0.6
    context_spread: float = 1.0
    teacher_determinism: float = 0.95
    sep_prob: float = 0.04
    end_prob: float = 0.0005
    max_len: int = 128
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    rollouts_per_prompt: int = 4
    steps: int = 400
    seed: int = 5

    def __post_init__(self):
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be positive")
        if self.vocab_size < len(NAMED_TOKENS):
            raise ValueError(f"vocab_size must be >= {len(NAMED_TOKENS)}")
        if self.markov_order not in (1, 2):
            raise ValueError("markov_order must be 1 or 2 (dense tables)")
        if isinstance(self.optimizer, Mapping):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        if self.planted_rock_tokens is not None:
            planted = tuple(int(v) for v in self.planted_rock_tokens)
            if any(not 0 <= v < len(NAMED_TOKENS) for v in planted):
                raise ValueError("planted tokens must be named vocabulary tokens")
            object.__setattr__(self, "planted_rock_tokens", planted)
        if self.optimizer.kind not in ("sgd", "adaptive_moment"):
            raise ValueError(f"unknown optimizer {self.optimizer.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], Mapping):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if d.get("planted_rock_tokens") is not None:
            d["planted_rock_tokens"] = tuple(d["planted_rock_tokens"])
        return cls(**d)


def build_vocabulary(vocab_size: int = 64) -> Vocabulary:
    extra = tuple(f"<unused_{i}>" for i in range(vocab_size - len(NAMED_TOKENS)))
    return Vocabulary(NAMED_TOKENS + extra)


def token_id(name: str) -> int:
    return NAMED_TOKENS.index(name)


def prompt_operands(prompt_id: int) -> tuple[int, int]:
    return divmod(int(prompt_id) % 100, 10)


def prompt_answer(prompt_id: int) -> int:
    d1, d2 = prompt_operands(prompt_id)
    return (d1 + d2) % 10


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = z - m
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def row_kl(student_logits: np.ndarray, teacher_logp: np.ndarray) -> np.ndarray:
    """KL(student || teacher) per row; entries with zero student mass drop out."""
    lp = log_softmax(student_logits)
    p = np.exp(lp)
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * (lp - log_softmax(teacher_logp)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def row_kl_grad(student_logits: np.ndarray, teacher_logp: np.ndarray) -> np.ndarray:
    """Exact gradient of KL(softmax(z) || q) with respect to the logits z.

    Both sides pass through the same normalization so that a student equal to
    the teacher yields an exactly zero gradient rather than rounding noise.
    """
    lp = log_softmax(student_logits)
    p = np.exp(lp)
    with np.errstate(invalid="ignore"):
        diff = np.where(p > 0, lp - log_softmax(teacher_logp), 0.0)
    kl = np.sum(p * diff, axis=-1, keepdims=True)
    return p * (diff - kl)


def entropy_rows(logits: np.ndarray) -> np.ndarray:
    lp = log_softmax(logits)
    p = np.exp(lp)
    return -np.sum(p * np.where(p > 0, lp, 0.0), axis=-1)


# ---------------------------------------------------------------------------
# world


@dataclass(frozen=True)
class PhraseTemplate:
    """A recurring phrase: a cue token followed by a fixed body with a block
    of planted tokens in the middle.  ``planted`` lists (row, token) pairs."""

    rocks: tuple[int, ...]
    tokens: tuple[int, ...]
    planted: tuple[tuple[int, int], ...]


@dataclass
class SimWorld:
    config: SimConfig
    vocabulary: Vocabulary
    teacher_logp: np.ndarray  # (rows, V) log-probabilities, -inf on unused ids
    student: np.ndarray  # (rows, V) trainable logits
    planted: tuple[int, ...]
    templates: tuple[PhraseTemplate, ...]
    pillar: int
    end: int
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None
    opt_t: int = 0
    checkpoints: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def V(self) -> int:
        return self.vocabulary.size

    @property
    def n_body_rows(self) -> int:
        return self.V ** self.config.markov_order

    def answer_row(self, prompt_id: int) -> int:
        d1, d2 = prompt_operands(prompt_id)
        return self.n_body_rows + 10 * d1 + d2

    def body_row(self, history: Sequence[int]) -> int:
        row = 0
        for tok in history[-self.config.markov_order :]:
            row = row * self.V + int(tok)
        return row

    def snapshot(self, name: str) -> None:
        self.checkpoints[name] = self.student.copy()

    def teacher_policy(self) -> "TablePolicy":
        return TablePolicy(self.teacher_logp)

    def student_policy(self, checkpoint: str | None = None) -> "TablePolicy":
        table = self.student if checkpoint is None else self.checkpoints[checkpoint]
        return TablePolicy(table.copy())

    def planted_rows(self, token: int | None = None) -> np.ndarray:
        """Rows carrying a planted offset (optionally only for one token)."""
        rows = {r for tpl in self.templates for r, v in tpl.planted if token is None or v == token}
        return np.array(sorted(rows), dtype=np.int64)


def save_world(world: SimWorld, path) -> None:
    """Store the config, the teacher table and every student checkpoint.

    Optimizer moments are not kept; a reloaded world can be evaluated and
    probed but resumes training with fresh moments.
    """
    arrays = {f"checkpoint_{k}": v for k, v in sorted(world.checkpoints.items())}
    cfg = json.dumps(world.config.to_dict(), sort_keys=True).encode()
    np.savez_compressed(
        path,
        config=np.frombuffer(cfg, dtype=np.uint8),
        teacher_logp=world.teacher_logp,
        student=world.student,
        **arrays,
    )


def load_world(path) -> SimWorld:
    """Rebuild the world from its stored config and restore the tables."""
    with np.load(path) as data:
        config = SimConfig.from_dict(json.loads(bytes(data["config"]).decode()))
        world = build_world(config)
        if not np.array_equal(world.teacher_logp, data["teacher_logp"]):
            raise ValueError(f"{path}: stored teacher does not match its config")
        world.student = data["student"].copy()
        world.checkpoints = {
            k[len("checkpoint_") :]: data[k].copy() for k in data.files if k.startswith("checkpoint_")
        }
    return world


@dataclass
class TablePolicy:
    """Decoding policy backed by a context -> logits table."""

    table: np.ndarray
    temperature: float = 1.0

    def logits(self, rows: np.ndarray) -> np.ndarray:
        z = self.table[rows]
        return z / self.temperature if self.temperature != 1.0 else z


def _zipf_weights(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w[rng.permutation(n)]


def _suffix_rows(suffix: Sequence[int], V: int, order: int) -> list[int]:
    """Body rows whose most recent tokens equal ``suffix``."""
    suffix = list(suffix)[-order:]
    free = order - len(suffix)
    fixed = 0
    for tok in suffix:
        fixed = fixed * V + tok
    return [h * V ** len(suffix) + fixed for h in range(V**free)]


def _phrase_rows(seq: Sequence[int], V: int, order: int) -> list[list[int]]:
    """Rows at which each step of a phrase is emitted (one list per step)."""
    return [_suffix_rows(seq[max(0, i - order + 1) : i + 1], V, order) for i in range(len(seq) - 1)]


def _draw_templates(config, groups, cue_pool, fillers, V, rng) -> list[tuple[tuple[int, ...], list[int]]]:
    """Pick cues and filler tokens so that no two phrase steps share a row."""
    order = config.markov_order
    claimed: set[int] = set()
    out = []
    cue_iter = iter(cue_pool)
    for group in groups:
        k = len(group)
        start = (config.phrase_length - k) // 2
        for _ in range(config.phrases_per_group):
            cue = next(cue_iter, None)
            if cue is None:
                raise SimulationError("not enough cue tokens for the phrase templates")
            for _attempt in range(1000):
                body = rng.choice(fillers, size=config.phrase_length).tolist()
                body[start : start + k] = rng.permutation(list(group)).tolist()
                seq = [cue] + body
                rows = [r for step in _phrase_rows(seq, V, order) for r in step]
                if len(set(rows)) == len(rows) and not claimed.intersection(rows):
                    claimed.update(rows)
                    out.append((tuple(group), [int(t) for t in seq]))
                    break
            else:
                raise SimulationError(f"could not place a phrase template for tokens {group}")
    return out


def build_world(config: SimConfig) -> SimWorld:
    vocab = build_vocabulary(config.vocab_size)
    V = vocab.size
    n_named = len(NAMED_TOKENS)
    order = config.markov_order
    n_body = V**order
    n_rows = n_body + 100
    rng = substream(config.seed, "teacher")

    sep = token_id(SEP) if config.planted_pillar_token is None else int(config.planted_pillar_token)
    end = token_id(END)
    if sep == end or not 0 <= sep < n_named or vocab[sep] in DIGITS:
        raise ValueError("the pillar token must be a named non-digit token other than <end>")
    planted = (
        tuple(token_id(t) for t in DEFAULT_PLANTED)
        if config.planted_rock_tokens is None
        else config.planted_rock_tokens
    )
    if sep in planted or end in planted:
        raise ValueError("separator and end tokens cannot be planted rocks")
    body_tokens = np.array([i for i in range(n_named) if i not in (sep, end)], dtype=np.int64)
    col = {int(t): j for j, t in enumerate(body_tokens)}
    base = _zipf_weights(len(body_tokens), config.zipf_exponent, rng)

    # teacher body rows: Zipf base modulated per context
    mod = np.exp(config.context_spread * rng.standard_normal((n_body, len(body_tokens))))
    w = base[None, :] * mod
    w /= w.sum(axis=1, keepdims=True)

    # phrase templates: frequent cue tokens open a fixed phrase around each
    # group of planted tokens
    reserved = set(planted) | {token_id(d) for d in DIGITS} | {token_id(OP), token_id(EQ)}
    by_weight = sorted((int(t) for t in body_tokens if int(t) not in reserved), key=lambda t: -base[col[t]])
    k = max(1, config.rocks_per_phrase)
    groups = [planted[i : i + k] for i in range(0, len(planted), k)]
    cue_pool = by_weight[: len(groups) * config.phrases_per_group]
    fillers = np.array(
        sorted(int(t) for t in body_tokens if int(t) not in set(planted) | set(cue_pool)), dtype=np.int64
    )
    templates = []
    for group, seq in _draw_templates(config, groups, cue_pool, fillers, V, rng):
        planted_at: list[tuple[int, int]] = []
        for i, rows in enumerate(_phrase_rows(seq, V, order)):
            nxt = seq[i + 1]
            share = config.planted_teacher_prob if nxt in group else config.phrase_prob
            j = col[nxt]
            others = w[rows].copy()
            others[:, j] = 0.0
            others /= others.sum(axis=1, keepdims=True)
            w[rows] = others * (1.0 - share)
            w[rows, j] = share
            if nxt in group:
                planted_at.extend((r, nxt) for r in rows)
        templates.append(PhraseTemplate(tuple(group), tuple(seq), tuple(planted_at)))

    probs = np.zeros((n_rows, V))
    probs[:n_body, body_tokens] = w * (1.0 - config.sep_prob - config.end_prob)
    probs[:n_body, sep] = config.sep_prob
    probs[:n_body, end] = config.end_prob

    # answer rows keyed by prompt operands, and the rows right after the answer
    det = config.teacher_determinism
    spread = base / base.sum()
    for d1 in range(10):
        for d2 in range(10):
            r = n_body + 10 * d1 + d2
            probs[r, body_tokens] = spread * (1.0 - det)
            probs[r, token_id(str((d1 + d2) % 10))] += det
    for d in DIGITS:
        for r in _suffix_rows([sep, token_id(d)], V, order):
            probs[r, :] = 0.0
            probs[r, body_tokens] = spread * (1.0 - det)
            probs[r, end] = det
    # full support on named tokens keeps stored distributions free of tail mass
    named = probs[:, :n_named]
    named[named == 0.0] = SUPPORT_FLOOR
    probs /= probs.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        teacher_logp = log_softmax(np.log(probs))

    # student: teacher plus per-entry noise plus the planted offsets
    srng = substream(config.seed, "student")
    noise = config.student_noise * srng.standard_normal((n_rows, V))
    student = np.where(np.isfinite(teacher_logp), teacher_logp + noise, -np.inf)
    for tpl in templates:
        for r, v in tpl.planted:
            student[r, v] += config.planted_offset

    world = SimWorld(
        config=config,
        vocabulary=vocab,
        teacher_logp=teacher_logp,
        student=student,
        planted=tuple(int(v) for v in planted),
        templates=tuple(templates),
        pillar=sep,
        end=end,
    )
    world.snapshot("pre")
    return world


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Rollouts:
    """Raw sampled completions: tokens and the table row used at each step."""

    prompt_ids: np.ndarray
    tokens: list[np.ndarray]
    rows: list[np.ndarray]
    starvation_events: int = 0


def _gumbels(seed: int, stream: str, prompt_ids, rollout_idx, max_len: int, V: int) -> np.ndarray:
    out = np.empty((len(prompt_ids), max_len, V))
    for i, (p, r) in enumerate(zip(prompt_ids, rollout_idx)):
        out[i] = substream(seed, stream, int(p), int(r)).gumbel(size=(max_len, V))
    return out


def sample(
    world: SimWorld,
    policy,
    prompt_ids: Sequence[int],
    rollout_idx: Sequence[int],
    seed: int,
    stream: str = "rollout",
    gumbel_cache: dict | None = None,
) -> Rollouts:
    """Gumbel-max ancestral sampling with one substream per (prompt, rollout).

    Two policies sampled with the same seed see identical noise, so banning
    a token the base policy never picks leaves the trajectories unchanged.
    """
    cfg = world.config
    V, L = world.V, cfg.max_len
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    rollout_idx = np.asarray(rollout_idx, dtype=np.int64)
    B = len(prompt_ids)
    key = (seed, stream, prompt_ids.tobytes(), rollout_idx.tobytes())
    if gumbel_cache is not None and key in gumbel_cache:
        g = gumbel_cache[key]
    else:
        g = _gumbels(seed, stream, prompt_ids, rollout_idx, L, V)
        if gumbel_cache is not None:
            gumbel_cache[key] = g
    eq = token_id(EQ)
    h2 = np.array([token_id(str(prompt_operands(p)[1])) for p in prompt_ids], dtype=np.int64)
    h1 = np.full(B, eq, dtype=np.int64)
    answer_rows = np.array([world.answer_row(p) for p in prompt_ids], dtype=np.int64)
    toks = np.full((B, L), -1, dtype=np.int64)
    rows_out = np.full((B, L), -1, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    lengths = np.full(B, L, dtype=np.int64)
    starvation = 0
    fallback = getattr(policy, "fallback_token", None)
    fallback = world.end if fallback is None else int(fallback)
    for t in range(L):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        if cfg.markov_order == 1:
            rows = h1[idx].copy()
        else:
            rows = h2[idx] * V + h1[idx]
        at_answer = h1[idx] == world.pillar
        rows[at_answer] = answer_rows[idx[at_answer]]
        z = policy.logits(rows) + g[idx, t]
        nxt = np.argmax(z, axis=1)
        starved = ~np.isfinite(z[np.arange(len(idx)), nxt])
        if hasattr(policy, "starved"):
            starved |= policy.starved(rows)
        if starved.any():
            starvation += int(starved.sum())
            nxt[starved] = fallback
        toks[idx, t] = nxt
        rows_out[idx, t] = rows
        h2[idx], h1[idx] = h1[idx], nxt
        finished = nxt == world.end
        lengths[idx[finished]] = t + 1
        alive[idx[finished]] = False
    if starvation and hasattr(policy, "starvation_events"):
        policy.starvation_events += starvation
    return Rollouts(
        prompt_ids=prompt_ids,
        tokens=[toks[i, : lengths[i]] for i in range(B)],
        rows=[rows_out[i, : lengths[i]] for i in range(B)],
        starvation_events=starvation,
    )


def is_correct(world: SimWorld, prompt_id: int, tokens: np.ndarray) -> bool:
    ans = token_id(str(prompt_answer(prompt_id)))
    return (
        len(tokens) >= 3
        and int(tokens[-1]) == world.end
        and int(tokens[-2]) == ans
        and int(tokens[-3]) == world.pillar
    )


def _trace_batch(
    world: SimWorld,
    ro: Rollouts,
    tables: Mapping[str, np.ndarray],
    first_id: int = 0,
    dist_names: Sequence[str] = (),
    dist_limit: int | None = None,
) -> list[TrajectoryTrace]:
    kls = {name: row_kl(tab, world.teacher_logp) for name, tab in tables.items()}
    out = []
    for i, (toks, rows) in enumerate(zip(ro.tokens, ro.rows)):
        losses = {name: quantize(kl[rows]) for name, kl in kls.items()}
        dists = None
        if dist_names and (dist_limit is None or first_id + i < dist_limit):
            dists = {}
            q = np.exp(world.teacher_logp[rows])
            for name in dist_names:
                tab = tables[name]
                dists[name] = DistPair(_dist_block(softmax(tab[rows])), _dist_block(q))
        out.append(
            TrajectoryTrace(
                trajectory_id=first_id + i,
                prompt_id=int(ro.prompt_ids[i]),
                tokens=toks,
                losses=losses,
                dists=dists,
            )
        )
    return out


def _dist_block(probs: np.ndarray) -> DistBlock:
    counts = np.sum(probs > 0, axis=1)
    k = int(np.min(counts)) if len(probs) else 0
    block = DistBlock.from_dense(probs, top_k=k)
    kept = quantize(block.probs)
    if np.all(counts == k):
        return DistBlock(block.ids, kept, np.zeros(len(probs)))
    # an underflowed entry in some row forces the others to drop their smallest
    tail = quantize(np.clip(1.0 - kept.sum(axis=1), 0.0, 1.0))
    return DistBlock(block.ids, kept, tail)


def rollout(
    world: SimWorld,
    prompts: int | Sequence[int],
    rollouts_per_prompt: int | None = None,
    seed: int = 0,
    score: Sequence[str] = ("pre", "post"),
    sampler: str | None = "post",
    with_dists: bool | Sequence[str] = False,
    dist_limit: int | None = None,
    chunk: int = 256,
) -> Corpus:
    """Sample trajectories and score every position at the named checkpoints.

    ``sampler`` names the checkpoint whose policy generates the text (``None``
    uses the current student).  Each recorded loss is the exact reverse KL of
    the scoring checkpoint's row against the teacher row.

    ``with_dists`` attaches full distributions for every scored checkpoint
    (``True``) or only the named ones; ``dist_limit`` restricts them to the
    first that many trajectories to keep trace files small.
    """
    if with_dists is True:
        dist_names = tuple(score)
    elif not with_dists:
        dist_names = ()
    else:
        dist_names = tuple(with_dists)
        missing = set(dist_names) - set(score)
        if missing:
            raise ValueError(f"distributions requested for unscored checkpoints {sorted(missing)}")
    R = world.config.rollouts_per_prompt if rollouts_per_prompt is None else rollouts_per_prompt
    prompt_list = list(range(prompts)) if isinstance(prompts, (int, np.integer)) else list(prompts)
    pairs = [(p, r) for p in prompt_list for r in range(R)]
    tables = {name: (world.student if name == "current" else world.checkpoints[name]) for name in score}
    if sampler is None or sampler == "current":
        policy = TablePolicy(world.student)
    else:
        policy = TablePolicy(world.checkpoints[sampler])
    trajs: list[TrajectoryTrace] = []
    for start in range(0, len(pairs), chunk):
        part = pairs[start : start + chunk]
        ro = sample(world, policy, [p for p, _ in part], [r for _, r in part], seed)
        trajs.extend(_trace_batch(world, ro, tables, start, dist_names, dist_limit))
    return Corpus(tuple(trajs), world.vocabulary, tuple(score))


# ---------------------------------------------------------------------------
# training

MaskProvider = Callable[[Corpus], Sequence[np.ndarray]]


@dataclass
class TrainingLog:
    steps: list[int] = field(default_factory=list)
    mean_kl: list[float] = field(default_factory=list)
    active_terms: list[int] = field(default_factory=list)
    total_terms: list[int] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def rows(self):
        for s, kl, a, n in zip(self.steps, self.mean_kl, self.active_terms, self.total_terms):
            yield {"step": s, "mean_kl": kl, "active_terms": a, "total_terms": n}


def train(
    world: SimWorld,
    steps: int | None = None,
    mask_source: MaskProvider | None = None,
    seed: int | None = None,
    checkpoint_steps: Mapping[str, int] | None = None,
    batch_size: int | None = None,
    optimizer: OptimizerConfig | None = None,
) -> TrainingLog:
    """On-policy distillation of the tabular student.

    Each step samples a batch from the current student, weights every
    position by the mask (1 without a mask source), and descends the exact
    reverse-KL gradient of the visited rows.  Positions with weight 0 add no
    gradient term.  The loss is the per-trajectory sum averaged over the
    batch.  Checkpoints named in ``checkpoint_steps`` are snapshotted after
    the given number of steps; ``"post"`` is always taken at the end.
    """
    cfg = world.config
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    B = cfg.batch_size if batch_size is None else batch_size
    opt = optimizer or cfg.optimizer
    wanted = dict(checkpoint_steps or {})
    log_ = TrainingLog()
    n_rows = world.student.shape[0]
    finite = np.isfinite(world.student)
    if opt.kind == "adaptive_moment" and world.opt_m is None:
        world.opt_m = np.zeros_like(world.student)
        world.opt_v = np.zeros_like(world.student)
        world.opt_m[~finite] = 0.0
    for name, at in wanted.items():
        if at == 0:
            world.snapshot(name)
    for step in range(1, steps + 1):
        rng = substream(seed, "train-prompts", step)
        prompt_ids = rng.integers(0, 100, size=B)
        ro = sample(world, TablePolicy(world.student), prompt_ids, np.zeros(B, dtype=np.int64), seed, stream=f"train-{step}")
        if mask_source is not None:
            batch = Corpus(
                tuple(_trace_batch(world, ro, {"current": world.student})),
                world.vocabulary,
                ("current",),
            )
            weights = [np.asarray(w, dtype=float) for w in mask_source(batch)]
        else:
            weights = [np.ones(len(t)) for t in ro.tokens]
        rows = np.concatenate(ro.rows)
        wts = np.concatenate(weights)
        if rows.shape != wts.shape:
            raise SimulationError("mask does not match the sampled batch")
        active = wts != 0
        visits = np.bincount(rows[active], weights=wts[active], minlength=n_rows)
        touched = np.flatnonzero(visits)
        kl_rows = row_kl(world.student[np.unique(rows)], world.teacher_logp[np.unique(rows)])
        mean_kl = float(np.sum(kl_rows[np.searchsorted(np.unique(rows), rows)]) / len(rows))
        if touched.size:
            g = row_kl_grad(world.student[touched], world.teacher_logp[touched])
            g = np.where(finite[touched], g, 0.0) * (visits[touched] / B)[:, None]
            _apply_update(world, touched, g, opt)
        if not np.all(np.isfinite(world.student[finite])):
            raise SimulationError(f"non-finite student logits after step {step}")
        log_.steps.append(step)
        log_.mean_kl.append(mean_kl)
        log_.active_terms.append(int(active.sum()))
        log_.total_terms.append(int(len(rows)))
        for name, at in wanted.items():
            if at == step:
                world.snapshot(name)
                log_.checkpoints.append(name)
    world.snapshot("post")
    log_.checkpoints.append("post")
    return log_


def _apply_update(world: SimWorld, rows: np.ndarray, grad: np.ndarray, opt: OptimizerConfig) -> None:
    if opt.kind == "sgd":
        world.student[rows] -= opt.lr * grad
        return
    world.opt_t += 1
    t = world.opt_t
    # moments are only advanced on rows that received a gradient term
    m = world.opt_m[rows] * opt.beta1 + (1.0 - opt.beta1) * grad
    v = world.opt_v[rows] * opt.beta2 + (1.0 - opt.beta2) * grad * grad
    world.opt_m[rows] = m
    world.opt_v[rows] = v
    mhat = m / (1.0 - opt.beta1**t)
    vhat = v / (1.0 - opt.beta2**t)
    step = opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    world.student[rows] -= np.where(np.isfinite(world.student[rows]), step, 0.0)


# ---------------------------------------------------------------------------
# evaluation and diagnostics


def evaluate_accuracy(
    world: SimWorld,
    policy,
    prompts: int | Sequence[int],
    rollouts_per_prompt: int = 5,
    seed: int = 0,
    stream: str = "eval",
    gumbel_cache: dict | None = None,
) -> np.ndarray:
    """Per-prompt 0/1 indicator: 1 iff a strict majority of rollouts is correct.

    Rollout ``r`` of prompt ``p`` always draws from substream (seed, p, r), so
    different policies evaluated with one seed are paired.
    """
    prompt_list = list(range(prompts)) if isinstance(prompts, (int, np.integer)) else list(prompts)
    pids = np.repeat(prompt_list, rollouts_per_prompt)
    ridx = np.tile(np.arange(rollouts_per_prompt), len(prompt_list))
    ro = sample(world, policy, pids, ridx, seed, stream=stream, gumbel_cache=gumbel_cache)
    correct = np.array([is_correct(world, p, t) for p, t in zip(pids, ro.tokens)], dtype=np.int64)
    per_prompt = correct.reshape(len(prompt_list), rollouts_per_prompt).sum(axis=1)
    return (2 * per_prompt > rollouts_per_prompt).astype(np.int64)


@dataclass
class SimEnvironment:
    """Evaluation environment for knockout experiments.

    Holds a world, the policy knockouts are applied to, and a noise cache so
    the arms of one experiment reuse the same Gumbel draws.
    """

    world: SimWorld
    base_policy: object
    stream: str = "eval"
    cache_noise: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def for_checkpoint(cls, world: SimWorld, checkpoint: str = "post", **kw) -> "SimEnvironment":
        return cls(world, world.student_policy(checkpoint), **kw)

    def evaluate(self, policy, prompts, rollouts_per_prompt: int, seed: int) -> np.ndarray:
        if self.cache_noise and len(self._cache) > 4:
            self._cache.clear()
        return evaluate_accuracy(
            self.world,
            policy,
            prompts,
            rollouts_per_prompt,
            seed,
            stream=self.stream,
            gumbel_cache=self._cache if self.cache_noise else None,
        )

    def phantom_tokens(self) -> tuple[int, ...]:
        """Token ids the policy can never emit (all logits -inf)."""
        return tuple(
            i for i, s in enumerate(self.world.vocabulary.id_to_string) if s.startswith("<unused")
        )


def trajectory_rows(world: SimWorld, prompt_id: int, tokens: Sequence[int]) -> np.ndarray:
    """Table row that generated each position of a completion."""
    V = world.V
    h2, h1 = token_id(str(prompt_operands(prompt_id)[1])), token_id(EQ)
    out = np.empty(len(tokens), dtype=np.int64)
    for t, tok in enumerate(tokens):
        if h1 == world.pillar:
            out[t] = world.answer_row(prompt_id)
        else:
            out[t] = h1 if world.config.markov_order == 1 else h2 * V + h1
        h2, h1 = h1, int(tok)
    return out


def token_entropies(
    world: SimWorld, corpus: Corpus, pre: str = "pre", post: str = "post"
) -> dict[int, dict[str, float]]:
    """Mean teacher / pre-student / post-student entropy over each token's
    positions in ``corpus``, read straight from the world's tables."""
    ent = {
        "teacher": entropy_rows(world.teacher_logp),
        "student_pre": entropy_rows(world.checkpoints[pre]),
        "student_post": entropy_rows(world.checkpoints[post]),
    }
    toks, rows = [], []
    for traj in corpus.trajectories:
        toks.append(np.asarray(traj.tokens))
        rows.append(trajectory_rows(world, traj.prompt_id, traj.tokens))
    if not toks:
        return {}
    toks_a, rows_a = np.concatenate(toks), np.concatenate(rows)
    freq = np.bincount(toks_a, minlength=world.V)
    sums = {k: np.bincount(toks_a, weights=v[rows_a], minlength=world.V) for k, v in ent.items()}
    return {int(t): {k: float(sums[k][t] / freq[t]) for k in ent} for t in np.flatnonzero(freq)}


def row_occupancy(world: SimWorld, table: np.ndarray | None = None) -> np.ndarray:
    """Expected visits per table row in one trajectory of at most ``max_len`` steps.

    Exact forward propagation of the row-visit distribution under the
    policy, averaged over the 100 prompts; the prompt-keyed answer rows are
    entered uniformly, which ignores the (weak) link between a prompt and
    the body text that precedes its separator.
    """
    table = world.student if table is None else table
    V, order = world.V, world.config.markov_order
    n_body, n_rows = world.n_body_rows, table.shape[0]
    p = softmax(table)
    rows = np.arange(n_rows)
    h1 = rows % V
    shift = (h1 * V) if order == 2 else np.zeros(n_rows, dtype=np.int64)
    after = _suffix_rows([world.pillar], V, order)[0] if order == 1 else None
    src, dst, val = [], [], []
    cont = [x for x in range(V) if x not in (world.pillar, world.end)]
    for r_lo, r_hi, is_answer in ((0, n_body, False), (n_body, n_rows, True)):
        rr = rows[r_lo:r_hi]
        for x in cont:
            if is_answer:
                nxt = _suffix_rows([world.pillar, x], V, order)[0] if order == 2 else np.full(len(rr), x)
                nxt = np.full(len(rr), nxt) if np.ndim(nxt) == 0 else nxt
            else:
                nxt = shift[rr] + x if order == 2 else np.full(len(rr), x)
            src.append(rr)
            dst.append(nxt)
            val.append(p[rr, x])
        if not is_answer:
            to_sep = p[rr, world.pillar] / 100.0
            for a in range(100):
                src.append(rr)
                dst.append(np.full(len(rr), n_body + a))
                val.append(to_sep)
        elif after is not None:
            src.append(rr)
            dst.append(np.full(len(rr), after))
            val.append(p[rr, world.pillar])
    trans = sparse.csr_matrix(
        (np.concatenate(val), (np.concatenate(src), np.concatenate(dst))), shape=(n_rows, n_rows)
    )
    state = np.zeros(n_rows)
    for d in range(10):
        state[world.body_row([token_id(str(d)), token_id(EQ)])] += 0.1
    visits = np.zeros(n_rows)
    trans_t = trans.T.tocsr()
    for _ in range(world.config.max_len):
        visits += state
        state = trans_t @ state
    return visits


def per_token_kl(world: SimWorld, table: np.ndarray | None = None) -> np.ndarray:
    """Expected reverse KL at the positions where each token is emitted.

    Token v gets sum_r N_r p(v|r) KL_r / sum_r N_r p(v|r) with N the
    expected row visits; tokens the policy never emits get 0.
    """
    table = world.student if table is None else table
    p = softmax(table)
    kl = row_kl(table, world.teacher_logp)
    occ = row_occupancy(world, table)
    num = p.T @ (occ * kl)
    den = p.T @ occ
    return np.divide(num, den, out=np.zeros_like(num), where=den > 1e-300)


def optimizer_suppression_probe(
    config: SimConfig,
    steps: int | None = None,
    prompts: int = 200,
    rare_freq_pct: float = 50.0,
    high_kl_pct: float = 70.0,
    arms: Sequence[OptimizerConfig] | None = None,
) -> dict:
    """Run paired training arms that differ only in the optimizer and report
    per-group relative KL reduction (planted rocks vs rare high-KL tokens).

    The report is descriptive; it makes no claim about which way it goes.
    """
    if arms is None:
        arms = (
            replace(config.optimizer, kind="sgd"),
            replace(config.optimizer, kind="adaptive_moment", lr=0.05),
        )
    report = {"seed": config.seed, "steps": steps or config.steps, "arms": []}
    for i, opt in enumerate(arms):
        world = build_world(replace(config, optimizer=opt))
        before = per_token_kl(world)
        freq = _emission_freq(world, prompts)
        train(world, steps=steps, optimizer=opt)
        after = per_token_kl(world)
        planted = np.array(world.planted)
        candidates = np.array(
            [v for v in range(len(NAMED_TOKENS)) if v not in world.planted and freq[v] > 0]
        )
        rare = candidates[
            (freq[candidates] <= np.percentile(freq[candidates], rare_freq_pct))
            & (before[candidates] >= np.percentile(before[candidates], high_kl_pct))
        ]
        arm = {"label": f"arm{i}", "optimizer": asdict(opt)}
        for gname, ids in (("planted_rock", planted), ("rare_high_kl", rare)):
            rel = np.divide(before[ids] - after[ids], before[ids], out=np.zeros(len(ids)), where=before[ids] > 0)
            arm[gname] = {
                "tokens": [int(v) for v in ids],
                "median_kl_before": float(np.median(before[ids])) if len(ids) else None,
                "median_kl_after": float(np.median(after[ids])) if len(ids) else None,
                "median_relative_reduction": float(np.median(rel)) if len(ids) else None,
            }
        report["arms"].append(arm)
    return report


def _emission_freq(world: SimWorld, prompts: int) -> np.ndarray:
    corpus = rollout(world, prompts, 1, seed=world.config.seed, score=("pre",), sampler="pre")
    return np.bincount(corpus.flat.tokens, minlength=world.V)
