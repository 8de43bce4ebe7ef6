"""Deterministic seed derivation.

Every random stream in the package is a ``numpy.random.Generator`` seeded
from a master seed plus a string label, hashed with SHA-256. This keeps
independent components (corpus synthesis, parameter init, batch shuffling,
trial resampling) reproducible and decoupled: adding a stream never shifts
another stream's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels: object) -> int:
    """Derive a child seed from a master seed and a label path."""
    key = ":".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *labels: object) -> np.random.Generator:
    """Generator seeded by ``derive_seed(master, *labels)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))
