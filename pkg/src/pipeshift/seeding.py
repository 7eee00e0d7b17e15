"""Deterministic seed derivation.

Every random draw in the package flows from a master seed through
``derive_seed``, so results are reproducible regardless of worker count or
evaluation order. String keys are hashed with SHA-256 (not Python's
randomized ``hash``) to keep derivations stable across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master: int, *keys: int | str) -> int:
    """Derive a child seed from a master seed and a path of keys."""
    entropy = [int(master) & _MASK64] + [_key_to_int(k) for k in keys]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(master: int, *keys: int | str) -> np.random.Generator:
    """Generator seeded from a derivation path."""
    return np.random.default_rng(derive_seed(master, *keys))
