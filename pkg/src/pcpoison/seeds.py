"""Deterministic seed derivation.

Every random stream in the pipeline is derived from a master seed plus a
role tag, so any stage can be rerun in isolation and reproduce the exact
stream it saw inside a larger run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_words(tags: tuple) -> list[int]:
    digest = hashlib.sha256(repr(tags).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(master_seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence that is a pure function of (master_seed, tags)."""
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *_tag_words(tags)])


def rng_from(master_seed: int, *tags) -> np.random.Generator:
    """Seeded generator for the stream identified by the given role tags."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *tags)))


def spawn_key(rng: np.random.Generator) -> int:
    """Draw a 63-bit base from ``rng`` for deriving child streams.

    Consuming one draw keeps the child streams a pure function of the
    caller's generator state while letting children be derived by index,
    independent of evaluation order.
    """
    return int(rng.integers(0, 2**63))


def derive_seed(master_seed: int, *tags) -> int:
    """63-bit integer seed for the stream identified by the role tags.

    Handy where an API wants a plain integer seed rather than a
    generator; equal (master_seed, tags) always yield the same value.
    """
    return spawn_key(rng_from(master_seed, *tags))
