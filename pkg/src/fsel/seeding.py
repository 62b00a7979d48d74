"""Deterministic seed derivation for all random streams in the toolkit.

Python's builtin ``hash`` is salted per process, so every stream here is
derived from SHA-256 over a length-prefixed encoding of the key parts.
Identical parts always yield identical streams, across runs and across
worker threads.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Map an arbitrary key tuple to a stable 64-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        encoded = str(part).encode("utf-8")
        h.update(len(encoded).to_bytes(4, "little"))
        h.update(encoded)
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(*parts: object) -> np.random.Generator:
    """Return a fresh generator seeded from the key tuple."""
    return np.random.default_rng(derive_seed(*parts))
