"""Named, reproducible random streams on top of the Philox counter-based generator.

Every piece of randomness in this package flows from a single 64-bit root
seed through named sub-streams ("train/data", "sample/17", ...). Stream keys
are derived by hashing the root seed together with the label path, so streams
are statistically independent and stable across runs, platforms, and process
restarts. There is no global RNG state anywhere.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "derive_key"]

_MAX_SEED = 2**64


def derive_key(root_seed: int, *labels: object) -> np.ndarray:
    """128-bit Philox key for the sub-stream named by ``labels``."""
    if not 0 <= int(root_seed) < _MAX_SEED:
        raise ValueError(f"root seed must be a 64-bit unsigned integer, got {root_seed}")
    h = hashlib.sha256()
    h.update(int(root_seed).to_bytes(8, "little"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return np.frombuffer(h.digest()[:16], dtype=np.uint64).copy()


def stream(root_seed: int, *labels: object) -> np.random.Generator:
    """Generator for the sub-stream of ``root_seed`` named by ``labels``."""
    return np.random.Generator(np.random.Philox(key=derive_key(root_seed, *labels)))
