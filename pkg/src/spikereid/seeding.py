"""Deterministic per-component RNG substreams.

All randomness flows from one master seed; component streams are derived by
stable hashing of component names (never the salted builtin hash).
"""

import hashlib

import numpy as np


def derive_seed(master_seed, *components):
    """64-bit seed from the master seed and a component path."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for c in components:
        h.update(b"/")
        h.update(str(c).encode())
    return int.from_bytes(h.digest()[:8], "little")


def component_rng(master_seed, *components):
    return np.random.default_rng(derive_seed(master_seed, *components))
