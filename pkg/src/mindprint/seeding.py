"""Hierarchical seed derivation.

Every random draw in the pipeline comes from a generator whose seed is
derived from the master seed and a path of keys, e.g.
``derive_seed(master, "study_one", "pics", "all", 3)``. Keys are hashed
with a stable digest, so the derived seed depends only on the path and
never on scheduling or worker count.
"""

import hashlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("integer seed keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master, *keys):
    """Return a 32-bit integer seed for the stage path ``keys``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(master, *keys):
    return np.random.default_rng(derive_seed(master, *keys))
