"""Stable seed derivation for named RNG streams."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Deterministic child seed from a base seed and a label path."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, int):
            entropy.append(label & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(label).encode()))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
