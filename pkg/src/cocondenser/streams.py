"""Named, reproducible random streams derived from one seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: object) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names: object) -> np.random.Generator:
    """Generator for ``(seed, *names)``; equal arguments give equal streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(_key, names)]))
