"""Seed derivation and the named pseudo-random generator.

Every random draw in the package comes from a numpy Philox4x64-10 bit
generator keyed by a sub-seed derived from a single root seed and a
scope path (e.g. ``derive_seed(0, "proposer")``). Philox is counter
based and fully specified, so a port in another language can reproduce
the byte-identical stream from the same key. ``GENERATOR_ID`` is
recorded in every artifact file that contains generated numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np

GENERATOR_ID = "numpy-philox4x64:v1"


def derive_seed(root: int, *scope: str) -> int:
    """Derive a 64-bit sub-seed from a root seed and a scope path.

    SHA-256 over the decimal root seed followed by each scope part encoded
    as ``<decimal byte length>:<utf-8 bytes>`` (netstring framing, so scope
    paths cannot collide); the first 8 digest bytes, big-endian, are the key.
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode("ascii"))
    for part in scope:
        encoded = part.encode("utf-8")
        h.update(b"%d:" % len(encoded))
        h.update(encoded)
    return int.from_bytes(h.digest()[:8], "big")


def make_rng(root: int, *scope: str) -> np.random.Generator:
    """Return a Philox generator keyed by ``derive_seed(root, *scope)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root, *scope)))
