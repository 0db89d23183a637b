"""Deterministic seed derivation.

Every stochastic component receives its randomness through a sub-seed
derived from one global seed plus a component label, so any piece of a
pipeline can be reproduced in isolation:

    sub = derive_seed(seed, "train", step)
    rng = np.random.default_rng(sub)

The split is a SHA-256 hash of the canonical string
``"unitdiff:<seed>:<label>:<label>..."`` truncated to 63 bits, which is
stable across platforms and Python versions (unlike ``hash()``).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "generator"]


def derive_seed(seed: int, *labels: str | int) -> int:
    """Derive a 63-bit sub-seed from a base seed and component labels."""
    key = "unitdiff:" + str(int(seed)) + "".join(f":{l}" for l in labels)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int, *labels: str | int) -> np.random.Generator:
    """A fresh PCG64 generator for the given (seed, labels) split."""
    if labels:
        return np.random.default_rng(derive_seed(seed, *labels))
    return np.random.default_rng(int(seed))
