"""Counter-based random streams.

Every photon owns a stream keyed by ``(seed, index)``.  A stream is the
SplitMix64 sequence started at that key, so draw ``k`` of photon ``i`` is a
pure function of ``(seed, i, k)`` and results do not depend on how photon
ranges are split across workers.

The stream state is a one-element ``uint64`` array so that the same jitted
helpers work from numba kernels and from plain Python.
"""

import numpy as np
from numba import njit, uint64

_GOLDEN = uint64(0x9E3779B97F4A7C15)
_M1 = uint64(0xBF58476D1CE4E5B9)
_M2 = uint64(0x94D049BB133111EB)
_INDEX_MULT = uint64(0xD1B54A32D192ED03)
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, inline="always")
def mix64(z):
    z = uint64(z)
    z = (z ^ (z >> uint64(30))) * _M1
    z = (z ^ (z >> uint64(27))) * _M2
    return z ^ (z >> uint64(31))


@njit(cache=True)
def stream_key(seed, index):
    """Initial state for photon ``index`` under global ``seed``."""
    k = mix64(uint64(seed) + _GOLDEN)
    return mix64(k ^ (uint64(index) * _INDEX_MULT + _GOLDEN))


@njit(cache=True, inline="always")
def next_uniform(state):
    """Uniform double in [0, 1); advances ``state[0]``."""
    state[0] = state[0] + _GOLDEN
    return float(mix64(state[0]) >> uint64(11)) * _TO_UNIT


@njit(cache=True, inline="always")
def next_open_uniform(state):
    """Uniform double in (0, 1]; safe under ``log``."""
    return 1.0 - next_uniform(state)


class Stream:
    """Python handle on a single counter-based stream."""

    __slots__ = ("seed", "index", "state")

    def __init__(self, seed: int, index: int = 0):
        self.seed = int(seed)
        self.index = int(index)
        self.state = np.array([stream_key(self.seed, self.index)], dtype=np.uint64)

    def random(self) -> float:
        return next_uniform(self.state)

    def uniforms(self, n: int) -> np.ndarray:
        return _fill_uniforms(self.state, n)


@njit(cache=True)
def _fill_uniforms(state, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = next_uniform(state)
    return out
