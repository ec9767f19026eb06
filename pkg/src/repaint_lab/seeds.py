"""Deterministic RNG derivation.

Every stochastic job derives its stream from a master seed plus a key path
(subject, structure, side, mode, run index, ...) so results never depend on
scheduling order or on how many workers executed the grid. Derivation hashes
the canonical key with SHA-256, which is stable across platforms and Python
processes (unlike hash()).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "rng_from_seed", "derive_rng"]


def derive_seed(master_seed: int, *parts) -> int:
    """128-bit integer seed derived from a master seed and a key path."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode("ascii"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:16], "little")


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    return rng_from_seed(derive_seed(master_seed, *parts))
