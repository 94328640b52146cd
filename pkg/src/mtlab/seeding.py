"""Seed derivation shared by every stochastic component.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=keys)``. Sub-streams are derived by appending
integer keys, so a per-utterance stream is ``rng_for(seed, STREAM, index)``
regardless of generation order or parallelism.
"""
from __future__ import annotations

import zlib

import numpy as np

# stream tags keep unrelated consumers of one seed apart
CORPUS = 1
NOISE = 2
KMEANS = 3
ENCODER_INIT = 4
MASKING = 5
SHUFFLE = 6
HEADS_INIT = 7
RVQ = 8
PROBE = 9


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def rng_for(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
