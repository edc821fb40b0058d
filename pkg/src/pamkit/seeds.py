"""Deterministic seed derivation.

Every random stream in the pipeline is derived from a single master seed
and a purpose string, so one integer reproduces an entire run and
independent jobs (clips, eval rows) get disjoint streams regardless of
execution order.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, purpose: str) -> int:
    """Map (master_seed, purpose) to a 64-bit child seed.

    Rule: SHA-256 over the master seed as 8 little-endian bytes, a '/'
    separator, and the UTF-8 purpose string; the first 8 digest bytes,
    little-endian, are the child seed.
    """
    h = hashlib.sha256()
    h.update((master_seed & _MASK64).to_bytes(8, "little"))
    h.update(b"/")
    h.update(purpose.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(master_seed: int, purpose: str) -> np.random.Generator:
    """Generator seeded by the derived child seed."""
    return np.random.default_rng(derive_seed(master_seed, purpose))
