"""Seed fan-out.

Every random stream in guardlab is derived from a master seed and a tuple of
string labels.  The labels are hashed with CRC32 (stable across processes and
Python versions, unlike ``hash``) and appended to the master seed as the
entropy of a :class:`numpy.random.SeedSequence`.  Two different label paths
therefore give statistically independent streams, and the same path always
gives the same stream.
"""

import zlib

import numpy as np


def stream_key(master_seed: int, *labels) -> list[int]:
    key = [int(master_seed)]
    for label in labels:
        key.append(zlib.crc32(str(label).encode("utf-8")))
    return key


def split(master_seed: int, *labels) -> np.random.Generator:
    """Return the generator for the stream ``labels`` under ``master_seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stream_key(master_seed, *labels))))
