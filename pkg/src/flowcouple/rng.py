"""Seed derivation.

Every random draw in a run is keyed by ``(seed, purpose-label, index...)`` so
that results never depend on call order or on how work is split up.
"""

from __future__ import annotations

import zlib

import numpy as np


def label_code(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def derive(seed: int, label: str, *index: int) -> np.random.Generator:
    """Independent generator for one (seed, label, index...) key."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, label_code(label)]
    key.extend(int(i) for i in index)
    return np.random.default_rng(key)


def as_generator(rng) -> np.random.Generator:
    # Generators pass through untouched, anything else seeds a fresh one
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
