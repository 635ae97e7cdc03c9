"""Deterministic RNG substreams derived from one master seed.

Every source of randomness in the package draws from a stream obtained via
``substream(master_seed, *labels)``. Labels are hashed stably (sha256), so the
same (seed, labels) pair yields bit-identical streams across runs, platforms
and worker counts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label) -> int:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master_seed: int, *labels) -> np.random.Generator:
    """Return a Generator for the named substream of ``master_seed``."""
    keys = tuple(_label_key(lab) for lab in labels)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=keys)
    return np.random.default_rng(seq)
