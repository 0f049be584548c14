"""Seeded, splittable random streams.

Every stream is a PCG64 generator keyed by ``SeedSequence([seed, *keys])``.
Replication ``r`` of an experiment draws from ``stream(seed, "rep", r)``, so
its numbers do not depend on how many other replications run or in which
order, and batched and one-at-a-time runs see identical data.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be nonnegative")
        return int(k)
    return zlib.crc32(str(k).encode())


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys])


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derived_seed(seed: int, *keys) -> int:
    """A plain integer seed for APIs that take one (e.g. ``SgdConfig.seed``)."""
    return int(seed_sequence(seed, *keys).generate_state(1, np.uint64)[0])
