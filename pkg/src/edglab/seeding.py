"""Deterministic seed derivation shared by data generation and the harness."""
from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, *parts) -> int:
    """Stable 63-bit child seed from a master seed and any hashable labels.

    Platform-independent (sha256 of the rendered key), so identical configs
    reproduce bit-identical streams everywhere.
    """
    key = repr((int(master),) + tuple(parts)).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def child_rng(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *parts))
