"""Seeded random number generation.

Every stochastic choice in the package (weight init, shuffles, episode
sampling, bootstraps, noise) draws from a PCG64 generator derived from one
root seed.  Independent subsystems get independent streams via
``stream(seed, *tags)``, which mixes the tags into a ``SeedSequence`` so the
streams never collide and never depend on call order elsewhere.
"""
from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a bare integer seed."""
    return np.random.Generator(np.random.PCG64(seed))


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"rng stream tags must be int or str, got {type(tag)!r}")


def stream(seed: int, *tags) -> np.random.Generator:
    """Derive a named, reproducible PCG64 stream from the root seed.

    Tags may be ints or short strings (e.g. ``stream(seed, "dim", step)``).
    """
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
