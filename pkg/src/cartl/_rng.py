"""Seed derivation.

Every random stream in the package is a Philox generator keyed by a
``SeedSequence`` whose spawn key is the path ``(replicate, role, ...)``.
SeedSequence hashes (entropy, spawn_key) into the generator state, so sibling
streams are independent and a stream never depends on how many other streams
were drawn before it.
"""

from __future__ import annotations

import zlib

import numpy as np



def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("seed keys must be non-negative")
    return part


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        raise TypeError("pass an int seed or SeedSequence, not a Generator")
    return np.random.SeedSequence(int(seed))


def substream(seed, *keys) -> np.random.SeedSequence:
    """Child sequence of ``seed`` addressed by ``keys`` (ints or strings)."""
    base = as_seed_sequence(seed)
    return np.random.SeedSequence(
        entropy=base.entropy,
        spawn_key=tuple(base.spawn_key) + tuple(_key(k) for k in keys),
    )


def generator(seed, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(substream(seed, *keys)))
