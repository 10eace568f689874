"""Keyed random streams.

Every random draw in the package comes from a generator derived from a base
seed plus a tuple of integer keys, so results never depend on the order in
which images, stages or batches are processed.
"""
from __future__ import annotations

import zlib

import numpy as np

# stage tags for substreams
ANGLES = 1
JITTER = 2
POISSON = 3
GAUSSIAN = 4
STRIATION = 5
SUBSAMPLE = 6
SPLIT = 7
INIT = 8
SHUFFLE = 9
AUGMENT = 10


def tag(name: str) -> int:
    """Stable integer key for a string label (e.g. a lattice name)."""
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit child seed, for places that store a seed rather than a generator."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
