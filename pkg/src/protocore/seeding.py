"""Deterministic seed derivation: one root seed, one child stream per consumer."""

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    # crc32 is stable across platforms and python versions, unlike hash()
    return zlib.crc32(str(tag).encode("utf-8"))


def child_seed(root: int, *tags) -> int:
    """Derive a 63-bit child seed from a root seed and a tag path.

    Every consumer of randomness (data generation, parameter init,
    batch shuffling, perturbations, reservoir, ...) derives its own
    child so that adding or removing one consumer never shifts the
    streams of the others.
    """
    seq = np.random.SeedSequence([int(root)] + [_tag_to_int(t) for t in tags])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def child_rng(root: int, *tags) -> np.random.Generator:
    """Generator seeded with child_seed(root, *tags)."""
    return np.random.default_rng(child_seed(root, *tags))
