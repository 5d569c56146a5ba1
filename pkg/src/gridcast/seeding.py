"""Deterministic sub-seed derivation.

All randomness flows from one root seed; components (world, init, shuffle,
dropout, ...) get stable named sub-streams so each stage is independently
reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def sub_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sub_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, name))
