"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np


def rng_stream(seed, name, *extra):
    """Return a Generator for the sub-stream ``name`` of ``seed``.

    Streams with different names (or extra integer keys, e.g. a fold or
    repetition index) are statistically independent, so one component can
    change its draws without disturbing another.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
