"""Noise-warping schemes: frame ``j`` input noise from frame ``j-1`` noise.

Grid-based schemes (nearest, bilinear, bridge) read the previous frame's
noise at ``T^-1(x)`` and refill pixels whose preimage left the frame with
fresh draws. The GP scheme instead evaluates the same RFF function at the
preimage under the cumulative flow to frame 0, which needs neither
interpolation nor refill.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bridge import bridge_2d, cell_normals
from .flow import FlowMap
from .grid import Field, Grid, field_bilinear_sample
from .kernels import KernelSpec, RffField, rff_eval, rff_eval_grid, rff_sample
from .streams import generator, hash_keys

SCHEMES = ("fixed", "resample", "nearest", "bilinear", "bridge", "gp")


@dataclass(frozen=True)
class WhiteSampler:
    """I.i.d. standard normal pixels."""

    def draw(self, grid: Grid, seed: int) -> Field:
        return Field(grid, generator(seed, 0x7768).standard_normal(grid.shape))


@dataclass(frozen=True)
class RffSampler:
    """A fresh RFF field per draw, evaluated on the grid."""

    spec: KernelSpec
    n_features: int = 3000
    threads: int = 1

    def field(self, seed: int) -> RffField:
        return rff_sample(self.spec, self.n_features, seed)

    def draw(self, grid: Grid, seed: int) -> Field:
        return rff_eval_grid(self.field(seed), grid, self.threads)


def _refill(values: np.ndarray, mask: np.ndarray, grid: Grid, sampler, seed: int) -> Field:
    if not mask.all():
        fresh = sampler.draw(grid, seed).values[..., 0]
        values = np.where(mask, values, fresh)
    return Field(grid, values)


def _check(noise: Field, flow: FlowMap):
    if noise.grid != flow.grid:
        raise ValueError("noise and flow live on different grids")
    if noise.channels != 1:
        raise ValueError("noise fields are single-channel")


def warp_fixed(noise_prev: Field, flow: FlowMap | None = None) -> Field:
    return noise_prev


def warp_resample(grid: Grid, sampler, seed: int) -> Field:
    return sampler.draw(grid, seed)


def warp_nearest(noise_prev: Field, flow: FlowMap, sampler, seed: int) -> Field:
    """Copy from the pixel nearest ``T^-1(x)``; exact half-pixel ties go to the lower index."""
    _check(noise_prev, flow)
    grid, mask = flow.grid, flow.inverse_mask
    q = grid.to_pixel(flow.source_points())
    j = np.clip(np.ceil(q[..., 0] - 0.5), 0, grid.width - 1).astype(np.int64)
    i = np.clip(np.ceil(q[..., 1] - 0.5), 0, grid.height - 1).astype(np.int64)
    return _refill(noise_prev.values[i, j, 0], mask, grid, sampler, seed)


def warp_bilinear(noise_prev: Field, flow: FlowMap, sampler, seed: int) -> Field:
    """Bilinear blend at ``T^-1(x)``. Shrinks the variance at subpixel offsets."""
    _check(noise_prev, flow)
    grid, mask = flow.grid, flow.inverse_mask
    pts = np.where(mask[..., None], flow.source_points(), 0.5)
    vals = field_bilinear_sample(noise_prev, pts)[..., 0]
    return _refill(vals, mask, grid, sampler, seed)


def warp_bridge(noise_prev: Field, flow: FlowMap, sampler, seed: int) -> Field:
    """Tensor-product Brownian bridge inside the cell enclosing ``T^-1(x)``."""
    _check(noise_prev, flow)
    grid, mask = flow.grid, flow.inverse_mask
    pts = np.where(mask[..., None], flow.source_points(), 0.5)
    q = grid.to_pixel(pts)
    j0 = np.clip(np.floor(q[..., 0]), 0, max(grid.width - 2, 0)).astype(np.int64)
    i0 = np.clip(np.floor(q[..., 1]), 0, max(grid.height - 2, 0)).astype(np.int64)
    j1 = np.minimum(j0 + 1, grid.width - 1)
    i1 = np.minimum(i0 + 1, grid.height - 1)
    sx = q[..., 0] - j0 if grid.width > 1 else np.zeros(grid.shape)
    sy = q[..., 1] - i0 if grid.height > 1 else np.zeros(grid.shape)
    v = noise_prev.values[..., 0]
    corners = (v[i0, j0], v[i0, j1], v[i1, j0], v[i1, j1])
    z = cell_normals(seed, i0 * grid.width + j0, sx, sy)
    return _refill(bridge_2d(corners, sx, sy, z), mask, grid, sampler, seed)


def warp_gp(field: RffField, cumulative_flow: FlowMap | None, grid: Grid, threads: int = 1):
    """Evaluate the frame-0 RFF function at the frame-0 preimages of the pixels.

    Returns ``(noise, points)``. Preimages outside the unit square are fine:
    the function is defined on the whole plane.
    """
    if cumulative_flow is None:
        return rff_eval_grid(field, grid, threads), grid.coords()
    if cumulative_flow.grid != grid:
        raise ValueError("flow and grid differ")
    pts = cumulative_flow.source_points()
    return Field(grid, rff_eval(field, pts, threads)), pts


def warp_step(scheme: str, noise_prev: Field, flow: FlowMap, sampler, seed: int) -> Field:
    """One grid-based warping step for the named scheme (not ``gp``)."""
    if scheme == "fixed":
        return warp_fixed(noise_prev, flow)
    if scheme == "resample":
        return warp_resample(noise_prev.grid, sampler, seed)
    if scheme == "nearest":
        return warp_nearest(noise_prev, flow, sampler, seed)
    if scheme == "bilinear":
        return warp_bilinear(noise_prev, flow, sampler, seed)
    if scheme == "bridge":
        return warp_bridge(noise_prev, flow, sampler, seed)
    raise ValueError(f"unknown grid warping scheme {scheme!r}")


def frame_seed(seed: int, frame: int) -> int:
    """Seed for fresh draws in ``frame`` of a video seeded with ``seed``."""
    return int(hash_keys(seed, frame, 0x66726D))


def noise_sequence(scheme: str, grid: Grid, flows, sampler, seed: int, threads: int = 1) -> list[Field]:
    """Input noise for frames ``0..len(flows)`` under ``scheme``.

    Frame 0 is a draw from ``sampler`` (for ``gp`` the sampler must be an
    :class:`RffSampler`, whose field is then reused for every frame).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    if scheme == "gp":
        if not isinstance(sampler, RffSampler):
            raise ValueError("the gp scheme needs an RFF sampler")
        field = sampler.field(seed)
        cum = [None] + list(flows.cumulative())
        return [warp_gp(field, c, grid, threads)[0] for c in cum]
    out = [sampler.draw(grid, seed)]
    for j, f in enumerate(flows, start=1):
        out.append(warp_step(scheme, out[-1], f, sampler, frame_seed(seed, j)))
    return out
