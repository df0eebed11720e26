"""Named, independent RNG substreams derived from one root seed.

Every random draw in the toolkit goes through substream(seed, *name parts),
so adding or removing one consumer never shifts the draws of another, and
identical configs reproduce identical artifacts byte for byte.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed, *key):
    """Independent RNG stream named by (seed, key parts)."""
    entropy = [int(seed) & _MASK64]
    entropy.extend(zlib.crc32(str(part).encode()) for part in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))
