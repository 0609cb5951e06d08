"""Seeded random substreams.

Every stochastic routine takes an explicit 64-bit seed and derives named
substreams from it, so results never depend on call order.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & _MASK64


def substream(seed: int, *names) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and a path of names/integers."""
    entropy = [int(seed) & _MASK64] + [_key(p) for p in names]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *names) -> int:
    """A child 64-bit seed, for handing to code that takes a plain integer."""
    ss = np.random.SeedSequence([int(seed) & _MASK64] + [_key(p) for p in names])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
