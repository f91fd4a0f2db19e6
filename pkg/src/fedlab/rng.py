"""Keyed random streams.

Every consumer (init, partitioning, batching, sampling, augmentation) draws
from its own generator derived from ``(master_seed, stream_name, *keys)``, so
adding draws to one consumer never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    entropy = [int(master_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(k) & 0xFFFFFFFF for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
