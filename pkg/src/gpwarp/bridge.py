"""Brownian-bridge stochastic interpolation of white noise.

Between two independent N(0, 1) nodes ``a`` and ``b`` the bridge value at
``s`` in ``[0, 1]`` is

    (1 - s) a + s b + sqrt(2 s (1 - s)) z,    z ~ N(0, 1),

whose marginal (over a, b, z) is N(0, 1) for every ``s`` while its law given
``a, b`` has variance ``2 s (1 - s)``. The 2-D version used here is a tensor
product: bridge along x on the top and bottom cell edges, then bridge along
y between the two results, with independent ``z`` at each stage.
"""

from __future__ import annotations

import numpy as np

from .streams import generator, hash_keys, hashed_normals


def bridge_1d(a, b, s, z):
    """Bridge formula with an explicit standard-normal draw ``z`` (vectorized)."""
    s = np.asarray(s, dtype=np.float64)
    return (1.0 - s) * a + s * b + np.sqrt(2.0 * s * (1.0 - s)) * z


def _check_unit(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("bridge coordinate must lie in [0, 1]")
    return s


def bridge_interp_1d(a: float, b: float, s: float, seed: int) -> float:
    s = _check_unit(s)
    z = generator(seed, 0x6272).standard_normal()
    return float(bridge_1d(a, b, s, z))


def bridge_2d(corners, sx, sy, z):
    """Tensor-product bridge in a unit cell.

    ``corners`` is ``(c00, c10, c01, c11)``: top-left, top-right,
    bottom-left, bottom-right (x to the right, y downwards). ``z`` holds
    three independent normals along its first axis: top edge, bottom edge,
    vertical stage.
    """
    c00, c10, c01, c11 = corners
    top = bridge_1d(c00, c10, sx, z[0])
    bottom = bridge_1d(c01, c11, sx, z[1])
    return bridge_1d(top, bottom, sy, z[2])


def bridge_interp_2d(corners, sx: float, sy: float, seed: int) -> float:
    sx, sy = _check_unit(sx), _check_unit(sy)
    # the first draw matches bridge_interp_1d with the same seed, so the
    # top edge reduces exactly to the 1-D bridge
    z = generator(seed, 0x6272).standard_normal(3)
    return float(bridge_2d(corners, sx, sy, z))


def cell_normals(seed: int, cell_index, sx, sy) -> np.ndarray:
    """Three normals per query, keyed on (seed, cell, fractional position).

    Returns shape ``(3,) + broadcast shape``; identical queries always see
    identical draws.
    """
    fx = np.round(np.asarray(sx, dtype=np.float64) * 2**40).astype(np.int64)
    fy = np.round(np.asarray(sy, dtype=np.float64) * 2**40).astype(np.int64)
    key = hash_keys(cell_index, fx, fy)
    return np.stack([hashed_normals(seed, key, stage) for stage in range(3)])
