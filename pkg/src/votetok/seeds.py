"""Labeled sub-seed derivation from a single root seed."""

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """A 63-bit seed that depends only on ``root`` and the label path."""
    key = ":".join([str(int(root))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng_for(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
