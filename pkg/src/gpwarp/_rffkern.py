"""Compiled inner loops for random-Fourier-feature evaluation.

Every output value is produced by one sequential loop over features, so the
result for a point never depends on how points are split across threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def _points(px, py, w, zx, zy, b, scale, out):
    n = px.shape[0]
    nf = w.shape[0]
    for p in range(n):
        x = px[p]
        y = py[p]
        s = 0.0
        for f in range(nf):
            s += w[f] * math.cos(zx[f] * x + zy[f] * y + b[f])
        out[p] = scale * s


@njit(nogil=True, cache=True)
def _grid_rows(ys, cos_a, sin_a, w, zy, scale, out):
    # cos(zx*x + b + zy*y) = cos(A)cos(B) - sin(A)sin(B), A over columns, B per row
    nrows = ys.shape[0]
    nf = w.shape[0]
    ncols = cos_a.shape[1]
    acc = np.empty(ncols)
    for r in range(nrows):
        y = ys[r]
        acc[:] = 0.0
        for f in range(nf):
            by = zy[f] * y
            c = w[f] * math.cos(by)
            s = w[f] * math.sin(by)
            for j in range(ncols):
                acc[j] += c * cos_a[f, j] - s * sin_a[f, j]
        for j in range(ncols):
            out[r, j] = scale * acc[j]


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(edges[i], edges[i + 1]) for i in range(parts) if edges[i + 1] > edges[i]]


def eval_points(points: np.ndarray, w, z, b, threads: int = 1) -> np.ndarray:
    pts = np.ascontiguousarray(points.reshape(-1, 2), dtype=np.float64)
    px, py = np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1])
    zx, zy = np.ascontiguousarray(z[:, 0]), np.ascontiguousarray(z[:, 1])
    out = np.empty(len(pts))
    scale = math.sqrt(2.0 / len(w))
    if threads <= 1:
        _points(px, py, w, zx, zy, b, scale, out)
    else:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda ab: _points(px[ab[0]:ab[1]], py[ab[0]:ab[1]], w, zx, zy, b, scale, out[ab[0]:ab[1]]),
                        _chunks(len(pts), 4 * threads)))
    return out.reshape(points.shape[:-1])


def eval_grid(xs: np.ndarray, ys: np.ndarray, w, z, b, threads: int = 1) -> np.ndarray:
    a = np.outer(z[:, 0], xs) + b[:, None]
    cos_a, sin_a = np.cos(a), np.sin(a)
    zy = np.ascontiguousarray(z[:, 1])
    out = np.empty((len(ys), len(xs)))
    scale = math.sqrt(2.0 / len(w))
    if threads <= 1:
        _grid_rows(ys, cos_a, sin_a, w, zy, scale, out)
    else:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda ab: _grid_rows(ys[ab[0]:ab[1]], cos_a, sin_a, w, zy, scale, out[ab[0]:ab[1]]),
                        _chunks(len(ys), 4 * threads)))
    return out
