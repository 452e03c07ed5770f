"""Named, independent random streams derived from one experiment seed.

Streams are keyed by strings (hashed with CRC32, which unlike ``hash`` is
stable across processes), so adding a new consumer never shifts the draws
seen by an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for ``(seed, *keys)``; equal arguments give identical draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(_key(k) for k in keys)]))
