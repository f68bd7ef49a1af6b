"""Named random sub-streams derived from one integer seed.

Each consumer (``init``, ``shuffle``, ``synthetic``...) draws from its own
stream, so adding a consumer never perturbs the others.
"""

import os
import zlib

import numpy as np

SEED_ENV = "STGCAST_SEED"


def rng_stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


def seed_from_env(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw not in (None, "") else int(default)
