"""Deterministic randomness for the simulator.

Every random draw in a run flows from one root seed. Independent streams are
derived by hashing the root seed together with a stream name and any indices
(slot number, account index, ...), then feeding the digest into a counter-based
Philox generator. Re-running any stream in isolation with the same keys
reproduces the same draws, which is what makes per-cell replay and per-module
unit tests possible.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def derive_seed(root_seed: int, *keys: object) -> int:
    """Derive a 64-bit sub-seed from a root seed and a key path."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for key in keys:
        h.update(_SEP)
        h.update(str(key).encode())
    return int.from_bytes(h.digest()[:8], "big")


def stream(root_seed: int, *keys: object) -> np.random.Generator:
    """A fresh Philox generator keyed by (root_seed, *keys)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root_seed, *keys)))
