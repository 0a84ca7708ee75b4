"""Seed derivation and counter-based generators.

Every random stream in the package is a Philox generator keyed by a
SeedSequence built from integers, so any stream can be reproduced in
isolation without replaying the ones before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels) -> int:
    """Sub-seed for a named component, stable across runs and platforms."""
    text = "/".join([str(int(seed) & _MASK64), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def counter_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) & _MASK64 for k in key])))


def labeled_rng(seed: int, *labels) -> np.random.Generator:
    return counter_rng(derive_seed(seed, *labels))
