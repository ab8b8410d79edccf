"""Counter-based noise streams addressed by (seed, stream, counter).

Backed by numpy's Philox4x64: the key holds (seed, stream) and the second
counter word holds the caller's draw counter, so every address maps to an
independent, reproducible block of random numbers.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def generator(seed: int, stream: int = 0, counter: int = 0) -> np.random.Generator:
    key = np.array([seed & _MASK, stream & _MASK], dtype=np.uint64)
    ctr = np.array([0, counter & _MASK, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))


def gaussian(shape, seed: int, stream: int = 0, counter: int = 0) -> np.ndarray:
    """Standard normal block at the given address."""
    return generator(seed, stream, counter).standard_normal(shape)


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts (used for per-task streams)."""
    ss = np.random.SeedSequence([p & _MASK for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
