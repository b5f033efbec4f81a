"""Deterministic per-component RNG derivation.

Every randomized procedure takes the run's single root seed; component
streams are derived by hashing (root, component-name) so that adding or
reordering components never shifts another component's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(root: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, name)))
