"""Counter-based uniforms keyed by (seed, site, global sample index).

Every draw is addressed directly, so a sample sees the same random numbers
whichever batch, worker or parallel scheme processes it. The generator is
numpy's Philox4x64 with key ``(seed, stream << 32 | site)``; the counter is
the global sample index divided by four, since each counter value yields four
64-bit words.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox

_MASK64 = (1 << 64) - 1
_WORDS_PER_COUNTER = 4

MEASURE_STREAM = 0
DISPLACEMENT_STREAM = 1


def _key(seed: int, site: int, stream: int) -> list[int]:
    if seed < 0 or site < 0:
        raise ValueError("seed and site index must be nonnegative")
    return [seed & _MASK64, ((stream & 0xFFFFFFFF) << 32) | (site & 0xFFFFFFFF)]


def raw_words(seed: int, site: int, start: int, count: int, stream: int = MEASURE_STREAM) -> np.ndarray:
    """64-bit words for global sample indices ``start .. start + count - 1``."""
    if count <= 0:
        return np.zeros(0, dtype=np.uint64)
    block, offset = divmod(start, _WORDS_PER_COUNTER)
    gen = Philox(key=_key(seed, site, stream), counter=[block, 0, 0, 0])
    return gen.random_raw(offset + count)[offset:]


def uniforms(seed: int, site: int, start: int, count: int, stream: int = MEASURE_STREAM) -> np.ndarray:
    """Uniform doubles in [0, 1) with 53 random bits each."""
    words = raw_words(seed, site, start, count, stream)
    return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53


def sample_uniform(seed: int, sample: int, site: int, stream: int = MEASURE_STREAM) -> float:
    """Single uniform for one (sample, site) pair; the per-sample oracle."""
    return float(uniforms(seed, site, sample, 1, stream)[0])
