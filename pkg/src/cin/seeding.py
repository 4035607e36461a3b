"""Deterministic derivation of independent RNG streams from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    """Return a Generator keyed by ``(seed, *tags)``.

    Tags are hashed with crc32, which is stable across platforms and
    Python processes, so the same (seed, tags) always yields the same
    stream while distinct tags yield independent streams.
    """
    words = [int(seed) & 0xFFFFFFFF]
    words.extend(zlib.crc32(str(t).encode("utf-8")) for t in tags)
    return np.random.default_rng(words)
