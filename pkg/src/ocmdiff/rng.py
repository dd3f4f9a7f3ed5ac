"""Reproducible random streams keyed by (master seed, label).

Every stream is an independent Philox counter-based generator whose key is
derived from a SHA-256 digest of the seed and the label, so adding a new
stream never perturbs an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10/sha256-key"


def stream(seed: int, *labels) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    text = "/".join([str(int(seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))
