"""Sub-seed derivation from one global seed.

``derive(seed, *tags)`` folds each tag into the state with the splitmix64
finaliser: ``state = splitmix64(state ^ splitmix64(h(tag)))`` where ``h`` is
CRC-32 of the tag's string form. The result is a 64-bit integer suitable for
``numpy.random.default_rng``.
"""

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive(seed: int, *tags) -> int:
    state = splitmix64(int(seed) & _MASK)
    for tag in tags:
        state = splitmix64(state ^ splitmix64(zlib.crc32(str(tag).encode("utf-8"))))
    return state


def rng_for(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *tags))
