"""Labeled fan-out of a single top-level seed.

Every random draw in the package comes from a generator built here, keyed
by a component label plus integer indices, so no global RNG state exists
and each stream is reproducible on its own.
"""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def derive_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, label_key(label), *(int(i) for i in indices)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, label: str, *indices: int) -> int:
    return int(derive_rng(seed, label, *indices).integers(0, 2**63 - 1))
