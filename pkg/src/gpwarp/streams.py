"""Reproducible random streams.

All randomness in the package flows through :func:`generator`, a Philox
(counter-based) generator keyed on a seed plus an optional tuple of stream
identifiers, so independent consumers never share or reorder draws.
:func:`hashed_normals` gives standard normals addressed by integer keys,
for per-point draws that must not depend on evaluation order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def generator(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_keys(*parts) -> np.ndarray:
    """Fold integer arrays (broadcast together) into one 64-bit key array."""
    arrays = np.broadcast_arrays(*[np.asarray(p).astype(np.uint64) for p in parts])
    with np.errstate(over="ignore"):
        h = np.full(arrays[0].shape, 0x243F6A8885A308D3, dtype=np.uint64)
        for a in arrays:
            h = _splitmix(h ^ a)
    return h


def _uniform_open(h: np.ndarray) -> np.ndarray:
    # 53 high bits -> (0, 1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def hashed_normals(seed: int, *keys) -> np.ndarray:
    """Standard normals, one per broadcast element of ``keys``.

    Box-Muller on two hashed uniforms; the value for a given (seed, key) is
    fixed regardless of how many other keys are drawn alongside it.
    """
    base = hash_keys(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), *keys)
    with np.errstate(over="ignore"):
        u1 = _uniform_open(_splitmix(base ^ np.uint64(1)))
        u2 = _uniform_open(_splitmix(base ^ np.uint64(2)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
