"""Deterministic named random substreams derived from one root seed.

Every randomness consumer (block sampling, sketches, priors, noise draws,
data splits, power iteration starts) pulls from its own named substream, so
results are reproducible and independent of worker count and of the order in
which unrelated components draw numbers.
"""

import zlib

import numpy as np


def substream(seed, name, *indices):
    """Return a Generator for substream ``name`` at optional per-call indices.

    The stream key mixes the root seed, a CRC of the stream name, and the
    index tuple (e.g. iteration or trial number), so streams never collide
    and never depend on Python's randomized string hashing.
    """
    words = (int(seed), zlib.crc32(name.encode("utf-8"))) + tuple(
        int(i) for i in indices
    )
    return np.random.default_rng(np.random.SeedSequence(words))


def as_generator(seed):
    """Accept an integer seed, a SeedSequence, or a ready Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(int(seed))
