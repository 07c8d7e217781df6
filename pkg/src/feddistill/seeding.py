"""Named, independent RNG streams derived from a master seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Generator for (seed, tag, keys...); streams never depend on each other."""
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode()), *map(int, keys)])
