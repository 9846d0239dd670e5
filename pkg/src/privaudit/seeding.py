"""Deterministic seed derivation.

Every random stream in the toolkit is derived from a user-facing base seed
plus a tuple of context labels (epoch number, method name, lambda index,
run index, ...).  Derivation hashes the canonical string encoding of the
tuple with BLAKE2b, so streams are stable across platforms and Python
versions, and changing any component yields an unrelated stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]


def derive_seed(*parts: object) -> int:
    """Hash ``parts`` into a 64-bit unsigned seed.

    Parts are joined by their ``str()`` with a separator that cannot occur
    in ints/floats/simple names, so ("a", 1) and ("a1",) differ.
    """
    canonical = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def derive_rng(*parts: object) -> np.random.Generator:
    """A fresh PCG64 generator seeded from :func:`derive_seed`."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
