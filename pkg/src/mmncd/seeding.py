"""Deterministic named random substreams.

Every random draw in the package flows from one root seed through a named
substream, so toggling one component (say, the exploration policy) never
perturbs the draws of another (say, batch shuffling). Streams keyed by a
per-use counter (e.g. ``"explore:173"``) make checkpoint resume exact: the
generator state is a pure function of (seed, name), nothing needs saving.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a fresh Generator for the (seed, name) pair.

    The same pair always yields an identical stream, on any platform.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
