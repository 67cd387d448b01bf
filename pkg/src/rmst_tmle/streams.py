"""Reproducible random streams.

Every stream is a numpy ``Philox`` generator (a counter-based 4x64 generator)
seeded by ``SeedSequence(seed, spawn_key=key)``.  Streams with different keys
are independent, and a stream depends only on ``(seed, key)``; it does not
depend on the order in which streams are created or the process that creates
them.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng"]


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))
