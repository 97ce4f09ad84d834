"""Named random streams derived from one integer seed.

Each consumer asks for a stream by a stable label, so adding a new consumer
never shifts the draws seen by existing ones.
"""

import zlib

import numpy as np


def stream_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())]).generate_state(1)[0])


def rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, label))
