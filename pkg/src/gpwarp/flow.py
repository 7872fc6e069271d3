"""Deformation maps between frames.

A :class:`FlowMap` for frame ``j-1 -> j`` stores, per pixel centre ``x``,

* ``inverse``: ``T^-1(x) - x``, where the frame-``j`` pixel came from in
  frame ``j-1`` (used to warp noise and to evaluate the video relation),
* ``forward``: ``T(x) - x``, where the frame-``j-1`` pixel goes in frame
  ``j`` (used to warp network outputs),

each with a mask of pixels whose image stays inside the hull of pixel
centres. Displacements are in domain units of the unit square.

Interpolating a *displacement* field extrapolates linearly past the border
cells, so affine motions (translations, rotations) compose exactly even off
frame; the masks still record which points left the frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse

from .grid import Field, FormatError, Grid, bilinear_weights

FLOW_MAGIC = b"WDFL"
FLOW_VERSION = 1
_FLOW_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class FlowMap:
    grid: Grid
    inverse: np.ndarray
    forward: np.ndarray
    inverse_mask: np.ndarray | None = None
    forward_mask: np.ndarray | None = None

    def __post_init__(self):
        shape = self.grid.shape + (2,)
        for name in ("inverse", "forward"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} displacement must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("displacements must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        coords = self.grid.coords()
        for name, disp in (("inverse_mask", self.inverse), ("forward_mask", self.forward)):
            hull = self.grid.in_hull(coords + disp)
            given = getattr(self, name)
            mask = hull if given is None else np.asarray(given, dtype=bool) & hull
            mask.setflags(write=False)
            object.__setattr__(self, name, mask)

    def source_points(self) -> np.ndarray:
        """``T^-1`` at every pixel centre, shape ``(H, W, 2)``."""
        return self.grid.coords() + self.inverse

    def target_points(self) -> np.ndarray:
        """``T`` at every pixel centre, shape ``(H, W, 2)``."""
        return self.grid.coords() + self.forward

    def inverted(self) -> "FlowMap":
        return FlowMap(self.grid, self.forward, self.inverse, self.forward_mask, self.inverse_mask)


@dataclass(frozen=True)
class FlowSequence:
    """Flows ``T_1..T_n``; entry ``j-1`` maps frame ``j-1`` to frame ``j``."""

    flows: tuple

    def __post_init__(self):
        flows = tuple(self.flows)
        if flows and any(f.grid != flows[0].grid for f in flows):
            raise ValueError("all flows in a sequence must share one grid")
        object.__setattr__(self, "flows", flows)

    def __len__(self):
        return len(self.flows)

    def __getitem__(self, i):
        return self.flows[i]

    def __iter__(self):
        return iter(self.flows)

    def cumulative(self) -> list[FlowMap]:
        """Flows relating frame 0 to frame ``j`` for ``j = 1..n`` (left fold).

        Errors from repeated bilinear lookups accumulate with ``j`` for
        non-affine motions.
        """
        out, acc = [], None
        for f in self.flows:
            acc = f if acc is None else flow_compose(acc, f)
            out.append(acc)
        return out


def identity_flow(grid: Grid) -> FlowMap:
    zero = np.zeros(grid.shape + (2,))
    return FlowMap(grid, zero, zero)


def flow_translate(grid: Grid, shift) -> FlowMap:
    """Content moves by ``shift = (ax, ay)`` (domain units): ``T(x) = x + a``."""
    a = np.asarray(shift, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError("shift must be two finite numbers")
    d = np.broadcast_to(a, grid.shape + (2,))
    return FlowMap(grid, -d, d)


def flow_translate_pixels(grid: Grid, dx: float, dy: float) -> FlowMap:
    return flow_translate(grid, (dx / grid.width, dy / grid.height))


def _rotate(points, angle, center):
    c, s = np.cos(angle), np.sin(angle)
    rel = points - center
    return np.stack([c * rel[..., 0] - s * rel[..., 1], s * rel[..., 0] + c * rel[..., 1]], axis=-1) + center


def flow_rotate(grid: Grid, angle: float, center=(0.5, 0.5)) -> FlowMap:
    """Rigid rotation by ``angle`` (radians, counter-clockwise in (x, y)) about ``center``."""
    if not np.isfinite(angle):
        raise ValueError("angle must be finite")
    center = np.asarray(center, dtype=np.float64)
    x = grid.coords()
    return FlowMap(grid, _rotate(x, -angle, center) - x, _rotate(x, angle, center) - x)


def flow_swirl(grid: Grid, strength: float, radius: float = 0.25, center=(0.5, 0.5)) -> FlowMap:
    """Rotation by ``strength * exp(-r^2 / radius^2)`` at distance ``r`` from ``center``.

    The rotation preserves ``r``, so the inverse is the same swirl with the
    opposite sign, evaluated exactly.
    """
    if not np.isfinite(strength):
        raise ValueError("strength must be finite")
    center = np.asarray(center, dtype=np.float64)
    x = grid.coords()
    theta = strength * np.exp(-((x - center) ** 2).sum(-1) / radius**2)
    return FlowMap(grid, _rotate(x, -theta, center) - x, _rotate(x, theta, center) - x)


def interp_displacement(grid: Grid, disp: np.ndarray, points) -> np.ndarray:
    rows, cols, w = bilinear_weights(grid, points, extrapolate=True)
    return np.einsum("...k,...kc->...c", w, disp[rows, cols])


def interp_mask(grid: Grid, mask: np.ndarray, points) -> np.ndarray:
    """True where ``points`` are in the hull and every stencil corner with
    nonzero weight is masked in."""
    inside = grid.in_hull(points)
    rows, cols, w = bilinear_weights(grid, points, extrapolate=True)
    ok = np.all(mask[rows, cols] | (w == 0), axis=-1)
    return inside & ok


def flow_compose(f1: FlowMap, f2: FlowMap) -> FlowMap:
    """``f2`` after ``f1``: maps frame ``j-1`` through ``j`` to ``j+1``."""
    if f1.grid != f2.grid:
        raise ValueError("flows live on different grids")
    grid = f1.grid
    x = grid.coords()
    p = x + f2.inverse
    inv = p + interp_displacement(grid, f1.inverse, p) - x
    inv_mask = f2.inverse_mask & interp_mask(grid, f1.inverse_mask, p)
    q = x + f1.forward
    fwd = q + interp_displacement(grid, f2.forward, q) - x
    fwd_mask = f1.forward_mask & interp_mask(grid, f2.forward_mask, q)
    return FlowMap(grid, inv, fwd, inv_mask, fwd_mask)


def invert_displacement(grid: Grid, disp: np.ndarray, iters: int = 8) -> np.ndarray:
    """Fixed-point inverse ``e(x) = -d(x + e(x))`` of a displacement field."""
    x = grid.coords()
    e = -disp
    for _ in range(iters):
        e = -interp_displacement(grid, disp, x + e)
    return e


_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


def flow_estimate_hs(frame_prev: Field, frame_next: Field, alpha: float = 0.1, iters: int = 500) -> FlowMap:
    """Horn-Schunck flow from ``frame_prev`` to ``frame_next``.

    Minimizes ``(Ix u + Iy v + It)^2 + alpha^2 |grad(u, v)|^2`` by Jacobi
    iterations from zero. The result is the forward motion; the inverse is
    obtained by fixed-point inversion.
    """
    if frame_prev.grid != frame_next.grid:
        raise ValueError("frames live on different grids")
    if frame_prev.channels != 1 or frame_next.channels != 1:
        raise ValueError("Horn-Schunck needs single-channel frames")
    grid = frame_prev.grid
    i1 = frame_prev.values[..., 0]
    i2 = frame_next.values[..., 0]
    if grid.width < 2 or grid.height < 2:
        return identity_flow(grid)
    gy1, gx1 = np.gradient(i1)
    gy2, gx2 = np.gradient(i2)
    ix, iy, it = 0.5 * (gx1 + gx2), 0.5 * (gy1 + gy2), i2 - i1
    denom = alpha**2 + ix**2 + iy**2
    u = np.zeros_like(i1)
    v = np.zeros_like(i1)
    if np.all(denom > 0):
        for _ in range(iters):
            ub = ndimage.convolve(u, _HS_AVG, mode="nearest")
            vb = ndimage.convolve(v, _HS_AVG, mode="nearest")
            r = (ix * ub + iy * vb + it) / denom
            u = ub - ix * r
            v = vb - iy * r
    fwd = np.stack([u / grid.width, v / grid.height], axis=-1)
    return FlowMap(grid, invert_displacement(grid, fwd), fwd)


def fold_density(flow: FlowMap) -> float:
    """Fraction of pixels where the forward map's Jacobian determinant is <= 0."""
    tx = flow.target_points()
    if min(flow.grid.shape) < 2:
        return 0.0
    dxdj = np.gradient(tx[..., 0], axis=1) * flow.grid.width
    dydj = np.gradient(tx[..., 1], axis=1) * flow.grid.width
    dxdi = np.gradient(tx[..., 0], axis=0) * flow.grid.height
    dydi = np.gradient(tx[..., 1], axis=0) * flow.grid.height
    return float(np.mean(dxdj * dydi - dydj * dxdi <= 0))


def sample_operator(grid: Grid, points: np.ndarray, mask: np.ndarray) -> sparse.csr_matrix:
    """Sparse bilinear sampling of a ``grid`` field at ``points``.

    Row ``r`` holds the stencil weights for point ``r`` (zero rows where
    ``mask`` is false). Its transpose scatters back with the same weights.
    """
    pts = np.asarray(points).reshape(-1, 2)
    m = np.asarray(mask).reshape(-1)
    safe = np.where(m[:, None], pts, 0.5)  # masked-out rows get a harmless in-hull stencil
    rows, cols, w = bilinear_weights(grid, safe)
    r = np.repeat(np.arange(len(pts)), 4)
    c = (rows * grid.width + cols).reshape(-1)
    vals = (w * m[:, None]).reshape(-1)
    return sparse.csr_matrix((vals, (r, c)), shape=(len(pts), grid.size))


def warp_operator(flow: FlowMap) -> sparse.csr_matrix:
    """``h -> h o T`` on masked-in pixels of frame ``j-1`` (forward direction)."""
    return sample_operator(flow.grid, flow.target_points(), flow.forward_mask)


# -- file format ------------------------------------------------------------

def flow_write(path, flow: FlowMap) -> None:
    h, w = flow.grid.shape
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, h, w))
        for disp, mask in ((flow.inverse, flow.inverse_mask), (flow.forward, flow.forward_mask)):
            fh.write(disp.astype("<f4").tobytes())
            fh.write(mask.astype(np.uint8).tobytes())


def flow_read(path) -> FlowMap:
    data = Path(path).read_bytes()
    if len(data) < _FLOW_HEADER.size:
        raise FormatError("truncated flow header")
    magic, version, h, w = _FLOW_HEADER.unpack_from(data)
    if magic != FLOW_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FLOW_VERSION:
        raise FormatError(f"unsupported flow version {version}")
    if h < 1 or w < 1:
        raise FormatError(f"bad dimensions {h}x{w}")
    k = h * w
    if len(data) != _FLOW_HEADER.size + 2 * (8 * k + k):
        raise FormatError("flow body size does not match dimensions")
    off = _FLOW_HEADER.size
    parts = []
    for _ in range(2):
        disp = np.frombuffer(data, dtype="<f4", count=2 * k, offset=off).reshape(h, w, 2).astype(np.float64)
        off += 8 * k
        mask = np.frombuffer(data, dtype=np.uint8, count=k, offset=off).reshape(h, w)
        off += k
        if np.any(mask > 1):
            raise FormatError("mask bytes must be 0 or 1")
        parts.append((disp, mask.astype(bool)))
    (inv, inv_m), (fwd, fwd_m) = parts
    return FlowMap(Grid(w, h), inv, fwd, inv_m, fwd_m)
