"""Named, reproducible random streams derived from one root seed.

``stream(seed, "selection")`` and ``stream(seed, "mutator", 3)`` are
statistically independent generators whose state depends only on the seed and
the name path, so adding a consumer never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in names))


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *names))
