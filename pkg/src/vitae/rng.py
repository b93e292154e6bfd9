"""Seeded random streams.

All randomness (initialization, shuffling, augmentation, masking) comes from
numpy's Philox-4x64 generator, a counter-based bit generator. Given the same
integer seed it yields the same stream on every platform, which makes masks
and augmentations reproducible across runs and implementations.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and optional sub-stream ids."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
