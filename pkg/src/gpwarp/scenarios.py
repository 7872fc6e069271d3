"""Synthetic video experiments: ground-truth videos under known flows,
observation tasks, and paired guided/unguided runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (GaussianData, GaussianDenoiser, MixtureData, MixtureDenoiser, NoiseCov, Observation,
                        PerturbedDenoiser, Schedule, downsample_operator, mask_operator, smooth_gain)
from .flow import FlowSequence, flow_translate_pixels
from .grid import Grid
from .guidance import GuidedRun, sample_video
from .kernels import KernelSpec, default_length_scale, grid_covariance_factors, rff_sample
from .metrics import mse, warping_error
from .streams import generator, hash_keys
from .warp import RffSampler, WhiteSampler, noise_sequence, warp_gp

TASKS = ("none", "mask", "downsample")
DATA = ("gaussian", "mixture")


def translation_flows(grid: Grid, n_frames: int, shift_px=(1.0, 0.0)) -> FlowSequence:
    f = flow_translate_pixels(grid, *shift_px)
    return FlowSequence([f] * (n_frames - 1))


def central_hole(grid: Grid, fraction: float = 0.5, points=None) -> np.ndarray:
    """Observation mask, false inside the centred square of side ``fraction``.

    ``points`` (default: the pixel centres) are tested against the square,
    so passing a frame's preimages in frame 0 gives a hole that moves with
    the scene.
    """
    p = grid.coords() if points is None else np.asarray(points)
    lo, hi = 0.5 - fraction / 2, 0.5 + fraction / 2
    inside = (p[..., 0] > lo) & (p[..., 0] < hi) & (p[..., 1] > lo) & (p[..., 1] < hi)
    return ~inside


def data_model(kind: str, grid: Grid, length_scale: float, offset: float = 0.75):
    """Smooth GP prior on the grid, or a two-mode mixture of shifted copies.

    The mixture has means ``+-offset`` (constant fields) and covariance
    ``(1 - offset^2)`` times the GP kernel, so pixel variance stays 1.
    """
    Sy, Sx = grid_covariance_factors(KernelSpec(length_scale, None), grid)
    S = np.kron(Sy, Sx)
    if kind == "gaussian":
        return GaussianData(np.zeros(grid.size), S)
    if kind == "mixture":
        m = offset * np.ones(grid.size)
        return MixtureData([0.5, 0.5], np.stack([m, -m]), np.stack([(1 - offset**2) * S] * 2))
    raise ValueError(f"data must be one of {DATA}")


def ground_truth_video(kind: str, grid: Grid, flows: FlowSequence, length_scale: float, seed: int,
                       offset: float = 0.75, n_features: int = 3000) -> np.ndarray:
    """Frames ``(n_frames, k)`` of one smooth function moved by ``flows``.

    The function is an RFF draw of the data kernel (plus a random-sign
    offset for the mixture), evaluated at each frame's preimages in frame 0,
    so content leaving the frame is replaced by the function's extension.
    """
    field = rff_sample(KernelSpec(length_scale, None), n_features, seed)
    cum = [None] + list(flows.cumulative())
    vals = np.stack([warp_gp(field, c, grid)[0].flat() for c in cum])
    if kind == "mixture":
        sign = 1.0 if generator(seed, 0x736e).random() < 0.5 else -1.0
        vals = sign * offset + np.sqrt(1 - offset**2) * vals
    return vals


def observations_for(task: str, grid: Grid, flows: FlowSequence, truth: np.ndarray, sigma_y: float,
                     seed: int, hole: float = 0.5, factor: int = 4, hole_motion: str = "scene"):
    """Per-frame :class:`Observation` of ``truth`` (``None`` for ``task='none'``).

    The mask hole either moves with the scene (``hole_motion='scene'``, a
    region of the content is missing in every frame) or stays put in the
    frame (``'fixed'``).
    """
    if task == "none":
        return None
    if task == "downsample":
        ops = [downsample_operator(grid, factor)] * len(truth)
    elif task == "mask":
        if hole_motion not in ("scene", "fixed"):
            raise ValueError("hole_motion must be 'scene' or 'fixed'")
        if hole_motion == "fixed":
            ops = [mask_operator(grid, central_hole(grid, hole))] * len(truth)
        else:
            pts = [grid.coords()] + [c.source_points() for c in flows.cumulative()]
            ops = [mask_operator(grid, central_hole(grid, hole, p)) for p in pts]
    else:
        raise ValueError(f"task must be one of {TASKS}")
    out, cache = [], {}
    for j, op in enumerate(ops):
        op = cache.setdefault(op.tobytes(), op)  # identical operators share one posterior
        obs = Observation(op, None, sigma_y)
        out.append(obs.with_y(obs.observe(truth[j], seed=int(hash_keys(seed, j)))))
    return out


@dataclass
class VideoSetup:
    grid: Grid
    flows: FlowSequence
    noise_spec: KernelSpec
    data: object
    truth: np.ndarray
    conditions: list | None
    denoiser: object
    n_features: int = 3000


def build_setup(resolution: int = 64, n_frames: int = 16, shift_px=(1.0, 0.0), data: str = "gaussian",
                task: str = "mask", data_length: float = 0.1, noise_length: float | None = None,
                truncation: float | None = 2.0, sigma_y: float = 0.05, hole: float = 0.5, factor: int = 4,
                hole_motion: str = "scene", perturb: float = 0.2, gain_cycles: int = 1, n_features: int = 3000,
                truth_seed: int = 0, flows: FlowSequence | None = None, offset: float = 0.75) -> VideoSetup:
    """Everything for a translation-video experiment except the per-run noise.

    The denoiser uses the exact covariance of the truncated RFF noise, so
    model and input noise agree. ``perturb > 0`` wraps it in a spatial gain
    ``1 + perturb sin(2 pi x) sin(2 pi y)``, breaking shift equivariance.
    """
    grid = Grid(resolution, resolution)
    if flows is None:
        flows = translation_flows(grid, n_frames, shift_px)
    elif len(flows) != n_frames - 1 or any(f.grid != grid for f in flows):
        raise ValueError("flows do not match the resolution and frame count")
    spec = KernelSpec(noise_length or default_length_scale(resolution), truncation)
    prior = data_model(data, grid, data_length, offset)
    truth = ground_truth_video(data, grid, flows, data_length, truth_seed, offset, n_features)
    conditions = observations_for(task, grid, flows, truth, sigma_y, truth_seed, hole, factor, hole_motion)
    noise = NoiseCov(factors=grid_covariance_factors(spec, grid, rff=True))
    den = GaussianDenoiser(prior, noise) if data == "gaussian" else MixtureDenoiser(prior, noise)
    if perturb:
        den = PerturbedDenoiser(den, smooth_gain(grid, perturb, gain_cycles))
    return VideoSetup(grid, flows, spec, prior, truth, conditions, den, n_features)


def run_noise(setup: VideoSetup, scheme: str, seeds, base: str = "rff", threads: int = 1) -> np.ndarray:
    """Input noise ``(n_frames, batch, k)`` for each seed under ``scheme``."""
    sampler = RffSampler(setup.noise_spec, setup.n_features, threads) if base == "rff" else WhiteSampler()
    per_seed = [np.stack([f.flat() for f in noise_sequence(scheme, setup.grid, setup.flows, sampler, s, threads)])
                for s in seeds]
    return np.stack(per_seed, axis=1)


def run_video(setup: VideoSetup, noise: np.ndarray, lam: float, schedule: Schedule, reduction: str = "sum",
              eps_g: float = 1e-12):
    """Sample one batched video; returns ``(frames, run)``."""
    run = GuidedRun(setup.flows, noise, setup.conditions, lam, eps_g, reduction)
    return sample_video(run, schedule, setup.denoiser), run


def evaluate_frames(setup: VideoSetup, frames: np.ndarray) -> dict:
    """Per-frame metrics, arrays of shape ``(n_frames, batch)``."""
    err_first = np.array(warping_error(list(frames), setup.flows, "first"))
    err_prev = np.array(warping_error(list(frames), setup.flows, "previous"))
    errs = np.array([mse(frames[j], setup.truth[j]) for j in range(len(frames))])
    return dict(err_first=err_first, err_prev=err_prev, mse=errs)
