"""Small shared helpers (seeded RNG streams)."""
from __future__ import annotations

import zlib

import numpy as np


def seeded_rng(seed: int, *tags: str) -> np.random.Generator:
    """Deterministic generator derived from a base seed and purpose tags.

    Every random draw in the package flows through one of these named
    streams so that a single top-level seed reproduces a whole run.
    """
    words = [zlib.crc32(t.encode("utf-8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))
