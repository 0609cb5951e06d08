import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_corpus
from rocktokens.trace import (
    Corpus,
    DistBlock,
    DistPair,
    TraceParseError,
    TraceValidationError,
    TrajectoryTrace,
    Vocabulary,
    align_checkpoints,
    load_corpus,
    load_vocabulary,
    quantize,
    write_corpus,
    write_vocabulary,
)

# sha256 of the 10-trajectory simulator trace, fixed at first build
GOLDEN10_SHA256 = "1d001ad1614271e1bce4b1495dd990b0bded0dc0e58a31316301324fad867108"


def _write(corpus, tmp_path, name="t.jsonl"):
    trace, vocab = tmp_path / name, tmp_path / "vocab.json"
    write_corpus(corpus, trace)
    write_vocabulary(corpus.vocabulary, vocab)
    return trace, vocab


def test_empty_trace_file_loads_as_empty_corpus(tmp_path):
    vocab = tmp_path / "v.json"
    write_vocabulary(Vocabulary(("a", "b")), vocab)
    (tmp_path / "t.jsonl").write_text("")
    corpus = load_corpus(tmp_path / "t.jsonl", vocab)
    assert len(corpus) == 0


def test_length_mismatch_is_rejected(tmp_path):
    vocab = tmp_path / "v.json"
    write_vocabulary(Vocabulary(("a", "b")), vocab)
    rec = {"schema": 1, "trajectory_id": 4, "prompt_id": 0, "tokens": [0, 1], "losses": {"pre": [0.1]}}
    (tmp_path / "t.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(TraceValidationError) as err:
        load_corpus(tmp_path / "t.jsonl", vocab)
    assert err.value.trajectory_id == 4 and err.value.field == "losses.pre"


def test_malformed_line_reports_line_number(tmp_path):
    vocab = tmp_path / "v.json"
    write_vocabulary(Vocabulary(("a",)), vocab)
    good = {"schema": 1, "trajectory_id": 0, "prompt_id": 0, "tokens": [0], "losses": {"pre": [0.1]}}
    (tmp_path / "t.jsonl").write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(TraceParseError) as err:
        load_corpus(tmp_path / "t.jsonl", vocab)
    assert err.value.line_no == 2


def test_golden10_round_trip(golden10, tmp_path):
    trace, vocab = _write(golden10, tmp_path)
    back = load_corpus(trace, vocab)
    assert len(back) == 10
    assert back.checkpoints == ("pre", "post")
    assert back.allclose(golden10)


def test_golden10_digest(golden10, tmp_path):
    trace, _ = _write(golden10, tmp_path)
    digest = hashlib.sha256(trace.read_bytes()).hexdigest()
    assert digest == GOLDEN10_SHA256


def test_write_twice_is_byte_identical(golden_corpus, tmp_path):
    a, _ = _write(golden_corpus, tmp_path, "a.jsonl")
    b, _ = _write(golden_corpus, tmp_path, "b.jsonl")
    assert a.read_bytes() == b.read_bytes()


def test_round_trip_with_dists(golden_corpus, tmp_path):
    small = golden_corpus.subset(range(5))
    trace, vocab = _write(small, tmp_path)
    back = load_corpus(trace, vocab)
    assert back.allclose(small)
    for a, b in zip(small.trajectories, back.trajectories):
        pa, pb = a.dists["post"], b.dists["post"]
        assert np.array_equal(pa.student.ids, pb.student.ids)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(tmp_path_factory, seed):
    corpus = random_corpus(seed, n_traj=6)
    d = tmp_path_factory.mktemp("rt")
    trace, vocab = _write(corpus, d)
    back = load_corpus(trace, vocab)
    for a, b in zip(corpus.trajectories, back.trajectories):
        assert a.trajectory_id == b.trajectory_id and a.prompt_id == b.prompt_id
        assert np.array_equal(a.tokens, b.tokens)
        for k in corpus.checkpoints:
            assert np.max(np.abs(a.losses[k] - b.losses[k]), initial=0.0) <= 1e-9 * max(1.0, np.max(a.losses[k], initial=0.0))


def _corruptions(corpus):
    t = corpus.trajectories[0]
    yield "negative loss", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, {**t.losses, "post": -np.abs(t.losses["post"]) - 1})
    yield "nan loss", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, {**t.losses, "pre": np.full(len(t), np.nan)})
    yield "short loss", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, {**t.losses, "pre": t.losses["pre"][:-1]})
    yield "negative id", TrajectoryTrace(-1, t.prompt_id, t.tokens, t.losses)
    yield "no checkpoints", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, {})
    bad = np.zeros((len(t), 2))
    bad[:, 0] = 0.7
    blk = DistBlock(np.tile([0, 1], (len(t), 1)), bad, np.zeros(len(t)))
    yield "dist mass", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, t.losses, {"pre": DistPair(blk, blk)})
    dup = DistBlock(np.zeros((len(t), 2), dtype=np.int64), np.full((len(t), 2), 0.5), np.zeros(len(t)))
    yield "dist duplicates", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, t.losses, {"pre": DistPair(dup, dup)})
    short = DistBlock(np.zeros((len(t) - 1, 1), dtype=np.int64), np.ones((len(t) - 1, 1)), np.zeros(len(t) - 1))
    yield "dist coverage", TrajectoryTrace(t.trajectory_id, t.prompt_id, t.tokens, t.losses, {"pre": DistPair(short, short)})


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, 7))
def test_validation_rejects_corrupted_corpora(seed, which):
    corpus = random_corpus(seed, n_traj=4, max_len=12)
    corpus = Corpus(
        tuple(t for t in corpus.trajectories if len(t) >= 2) or (TrajectoryTrace(1, 0, [0, 1], {"pre": [0.1, 0.2], "post": [0.1, 0.2]}),),
        corpus.vocabulary,
        corpus.checkpoints,
    )
    name, bad = list(_corruptions(corpus))[which]
    broken = Corpus((bad,) + corpus.trajectories[1:], corpus.vocabulary, corpus.checkpoints)
    with pytest.raises(TraceValidationError):
        broken.validate()


def test_token_outside_vocabulary_rejected():
    corpus = Corpus((TrajectoryTrace(0, 0, [0, 5], {"pre": [0.0, 0.0]}),), Vocabulary(("a", "b")), ("pre",))
    with pytest.raises(TraceValidationError):
        corpus.validate()


def test_missing_checkpoint_rejected():
    trajs = (TrajectoryTrace(0, 0, [0], {"pre": [0.0], "post": [0.0]}), TrajectoryTrace(1, 0, [0], {"pre": [0.0]}))
    with pytest.raises(TraceValidationError):
        Corpus(trajs, Vocabulary(("a",)), ("pre", "post")).validate()


def test_vocabulary_round_trip_allows_duplicate_strings(tmp_path):
    v = Vocabulary(("x", "x", "\n\n", "é"))
    write_vocabulary(v, tmp_path / "v.json")
    assert load_vocabulary(tmp_path / "v.json") == v


def test_align_identity_and_cardinality():
    t = TrajectoryTrace(7, 0, [1, 2, 3], {"pre": [0.1, 0.2, 0.3], "post": [0.1, 0.2, 0.3]})
    pairs = align_checkpoints(Corpus((t,), Vocabulary(tuple("abcd")), ("pre", "post")), "pre", "post")
    assert len(pairs) == 3
    assert all(p.loss_pre == p.loss_post for p in pairs)
    assert [p.t for p in pairs] == [0, 1, 2] and {p.trajectory_id for p in pairs} == {7}


def test_align_missing_checkpoint():
    t = TrajectoryTrace(0, 0, [1], {"pre": [0.1]})
    with pytest.raises(LookupError):
        align_checkpoints(Corpus((t,), Vocabulary(("a", "b")), ("pre",)), "pre", "post")


def test_align_matches_two_pass_scan(golden_corpus):
    pairs = align_checkpoints(golden_corpus, "pre", "post")
    assert len(pairs) == sum(len(t) for t in golden_corpus.trajectories)
    scan = []
    for traj in golden_corpus.trajectories:
        pre = {(traj.trajectory_id, i): v for i, v in enumerate(traj.losses["pre"].tolist())}
        for i, v in enumerate(traj.losses["post"].tolist()):
            scan.append((traj.trajectory_id, i, int(traj.tokens[i]), pre[(traj.trajectory_id, i)], v))
    assert sorted(tuple(p) for p in pairs) == sorted(scan)


def test_quantize_keeps_nine_digits():
    x = np.array([1.23456789012, 0.000123456789123, 0.0])
    assert quantize(x).tolist() == [1.23456789, 0.000123456789, 0.0]
