"""Deterministic seed derivation.

Every stochastic site gets its own Generator derived from (root seed, tag).
The derivation is pure: same root and tag always give the same stream, and
distinct tags give independent streams, so adding a new sampling site never
perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, tag: str) -> int:
    """Stable 64-bit sub-seed for a named sampling site."""
    h = hashlib.sha256(f"{root}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") & _MASK64


def spawn_rng(root: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag))
