"""Counter-based random streams.

Every stochastic step in the workbench draws from its own Philox stream
whose 128-bit key is derived from a master seed plus the integers/strings
identifying the step (frame index, trial index, tensor name, ...).  Streams
are therefore independent of generation order and worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# splitmix64 increment and mix constants
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _splitmix64(x: int) -> int:
    x = (x + _GAMMA) & _MASK64
    x ^= x >> 30
    x = (x * _MIX1) & _MASK64
    x ^= x >> 27
    x = (x * _MIX2) & _MASK64
    x ^= x >> 31
    return x


def derive_key(seed: int, *tags) -> tuple[int, int]:
    """Mix a master seed and identifying tags into a 128-bit Philox key.

    Tags may be ints or strings; strings are folded in bytewise so tensor
    names and purpose labels act as distinct dimensions of the stream space.
    """
    h = _splitmix64(seed & _MASK64)
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode():
                h = _splitmix64(h ^ b)
        else:
            h = _splitmix64(h ^ (int(tag) & _MASK64))
    lo = _splitmix64(h)
    hi = _splitmix64(lo)
    return lo, hi


def substream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the step identified by ``tags``."""
    key = derive_key(seed, *tags)
    return np.random.Generator(np.random.Philox(key=key))
