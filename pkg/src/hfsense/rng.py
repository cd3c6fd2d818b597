"""Named, reproducible random streams.

Every stream is a PCG64 generator seeded from ``SeedSequence([seed, *keys])``,
so replication ``i`` of a batch, or sensor ``k`` of a run, always draws the
same numbers no matter which other streams were created first.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_CHANNEL = 1
STREAM_SENSOR = 2
STREAM_TRAFFIC = 3
STREAM_CONTENTION = 4
STREAM_FADES = 5
STREAM_SCENARIO = 6
STREAM_REPLICATION = 7
STREAM_KEYS = 8


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def substream(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(_key, keys)])))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit child seed, e.g. for replication ``i`` of a batch."""
    ss = np.random.SeedSequence([int(seed), *map(_key, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def entropy_seed() -> int:
    return int(np.random.SeedSequence().entropy) & ((1 << 63) - 1)
