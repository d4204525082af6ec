import zlib

import numpy as np


def rng_for(seed, stream: str = "") -> np.random.Generator:
    """Generator for a named sub-stream of a global seed.

    Different stream names give statistically independent generators, so
    e.g. the dataset and the weight init can be reseeded separately.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())]
    return np.random.default_rng(np.random.SeedSequence(key))
