"""Stable seed derivation. All randomness in a run flows from one integer seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    """Map ``(seed, purpose)`` to a 63-bit integer via SHA-256.

    Unlike ``hash()``, the result does not depend on the interpreter's
    hash randomisation, so sub-seeds are stable across processes.
    """
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def as_generator(rng) -> np.random.Generator:
    """Accept an int seed, a SeedSequence or a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
