"""Named random substreams derived from a single root seed."""

import zlib

import numpy as np


def stable_hash(text):
    return zlib.crc32(text.encode("utf-8"))


def substream(seed, *names):
    """Return an independent ``np.random.Generator`` for ``(seed, *names)``.

    The same arguments always give the same stream; different names give
    statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    entropy.extend(stable_hash(str(n)) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def child_seed(rng):
    """Draw a 63-bit integer seed from ``rng`` (for torch generators)."""
    return int(rng.integers(0, 2**63 - 1))
