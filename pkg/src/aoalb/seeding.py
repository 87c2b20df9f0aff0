"""Deterministic child seeds derived from a root seed and a sub-stream name."""
import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Hash ``root`` and ``labels`` into a 63-bit seed.

    Distinct labels give statistically independent streams; the mapping is
    stable across processes and platforms.
    """
    text = "/".join([str(int(root))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def child_rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
