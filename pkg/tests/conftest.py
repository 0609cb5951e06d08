from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rocktokens import simlab  # noqa: E402
from rocktokens.trace import Corpus, TrajectoryTrace, Vocabulary  # noqa: E402


def random_corpus(seed: int, n_traj: int = 20, vocab: int = 30, max_len: int = 40, checkpoints=("pre", "post")) -> Corpus:
    """Zipf-ish tokens with exponential losses; ids start at 3 to exercise non-contiguous ids."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, vocab + 1) ** 1.1
    weights /= weights.sum()
    trajs = []
    for i in range(n_traj):
        T = int(rng.integers(1, max_len + 1))
        toks = rng.choice(vocab, size=T, p=weights)
        losses = {c: np.round(rng.exponential(1.0, size=T), 6) for c in checkpoints}
        trajs.append(TrajectoryTrace(3 * i + 1, i // 2, toks, losses))
    return Corpus(tuple(trajs), Vocabulary(tuple(f"t{k}" for k in range(vocab))), tuple(checkpoints))


@pytest.fixture(scope="session")
def trained_world():
    """Default world (seed 5) after the default 400 training steps."""
    world = simlab.build_world(simlab.SimConfig(seed=5))
    simlab.train(world)
    return world


@pytest.fixture(scope="session")
def golden_corpus(trained_world):
    """400 trajectories sampled from the trained student with full distributions."""
    return simlab.rollout(trained_world, 100, 4, seed=3, with_dists=True)


@pytest.fixture(scope="session")
def detection_corpus(trained_world):
    """500 prompts x 4 rollouts, losses only."""
    return simlab.rollout(trained_world, 500, 4, seed=5)


@pytest.fixture(scope="session")
def golden10(trained_world):
    return simlab.rollout(trained_world, 10, 1, seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = sorted(getattr(mod, "VERDICTS", ()), key=lambda l: int(l.split()[1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
