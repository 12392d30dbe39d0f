"""Named random sub-streams derived from a single integer seed."""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    # crc32 keeps the key stable across processes (hash() is salted)
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def child_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**31 - 1))
