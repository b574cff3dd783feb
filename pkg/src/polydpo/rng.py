"""Seed derivation: every random stream comes from one root seed.

A component name is hashed (SHA-256, so it is stable across interpreter runs)
and mixed with the root seed and optional integer keys through
``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def component_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed_sequence(root_seed: int, component: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, component_key(component), *[int(k) for k in keys]])


def derive_rng(root_seed: int, component: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``component`` (and optional sub-keys)."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(root_seed, component, *keys)))
