"""Deterministic seed derivation.

Every random stream in the package is a ``numpy.random.Generator`` over
PCG64. Child seeds come from ``SeedSequence([seed, *keys])`` where string
keys are mapped through CRC32, so stages can be rerun independently.
"""
import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def derive_seed(seed, *keys):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_key(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng(seed, *keys):
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.PCG64(int(seed)))
