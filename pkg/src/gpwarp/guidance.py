"""Video sampling with noise warping and equivariance self-guidance.

Frame 0 is sampled normally and its per-step denoiser outputs are kept.
For each later frame the input noise comes from the warping scheme; at every
step the current denoiser output is pulled back through the flow and
compared with the stored output of the previous frame,

    e_t = mean_x |h_j(T_j(x)) - h_{j-1}(x)|^2    over pixels staying in frame,

and after the Euler update the state moves against ``grad e_t``, normalized
by ``sqrt(e_t)``. The gradient is taken at the pre-step state and applied to
the post-step state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import Denoiser, NumericalError, Schedule, euler_step, initial_noise
from .flow import FlowMap, FlowSequence, warp_operator
from .grid import Field

REDUCTIONS = ("mean", "sum")


def _normalizer(n_masked: int, reduction: str) -> float:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    return 1.0 / n_masked if reduction == "mean" else 1.0


def warping_residual(h_curr: Field, h_prev: Field, flow: FlowMap, reduction: str = "sum"):
    """``(e, residual, mask)`` for ``h_curr o T - h_prev`` on in-frame pixels.

    ``e`` is NaN when no pixel stays in frame.
    """
    if h_curr.grid != flow.grid or h_prev.grid != flow.grid:
        raise ValueError("fields and flow live on different grids")
    mask = flow.forward_mask
    W = warp_operator(flow)
    r = (W @ h_curr.flat() - h_prev.flat()) * mask.reshape(-1)
    n = int(mask.sum())
    e = float((r**2).sum() * _normalizer(n, reduction)) if n else float("nan")
    return e, Field.from_flat(flow.grid, r), mask


def guidance_gradient(denoiser: Denoiser, u_t, t: float, c, residual: Field, flow: FlowMap,
                      reduction: str = "sum") -> np.ndarray:
    """``grad_{u_t} e_t`` through the denoiser: ``vjp(W^T (2/N) r)``."""
    n = int(flow.forward_mask.sum())
    if n == 0:
        return np.zeros_like(np.asarray(u_t, dtype=np.float64))
    W = warp_operator(flow)
    v = 2.0 * _normalizer(n, reduction) * (W.T @ residual.flat())
    return denoiser.vjp(u_t, t, c, v)


@dataclass
class GuidedRun:
    """State of one (possibly batched) video run.

    ``noise`` holds the unit-variance input noise per frame, shape
    ``(n_frames, k)`` or ``(n_frames, batch, k)``; ``conditions`` holds
    one conditioning value per frame (or is ``None``).
    """

    flows: FlowSequence
    noise: np.ndarray
    conditions: list | None = None
    lam: float = 1.0
    eps_g: float = 1e-12
    reduction: str = "sum"
    trajectory: np.ndarray | None = None
    frames: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.noise = np.asarray(self.noise, dtype=np.float64)
        if self.lam < 0:
            raise ValueError("guidance strength must be non-negative")
        if not self.eps_g > 0:
            raise ValueError("guard eps_g must be positive")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if len(self.noise) != len(self.flows) + 1:
            raise ValueError(f"{len(self.noise)} noise frames need {len(self.noise) - 1} flows, got {len(self.flows)}")
        if self.conditions is not None and len(self.conditions) != len(self.noise):
            raise ValueError("need one conditioning entry per frame")

    def condition(self, j):
        return None if self.conditions is None else self.conditions[j]


def _guided_frame(run: GuidedRun, j: int, schedule: Schedule, den: Denoiser):
    u = initial_noise(run.noise[j], schedule)
    c = run.condition(j)
    batched = u.ndim == 2
    traj = np.empty((schedule.n_steps,) + u.shape)
    guide = j > 0 and run.lam > 0
    if guide:
        flow = run.flows[j - 1]
        W = warp_operator(flow)
        mask = flow.forward_mask.reshape(-1)
        n = int(mask.sum())
        norm = _normalizer(n, run.reduction) if n else 0.0
    for i, t in enumerate(schedule.times()):
        h = den.evaluate(u, t, c)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite denoiser output in frame {j} at step {i}", i)
        traj[i] = h
        u_next = euler_step(u, t, schedule.dt, den, c, schedule, h=h)
        if guide:
            hw = (W @ np.atleast_2d(h).T).T
            r = (hw - np.atleast_2d(run.trajectory[i])) * mask
            e = (r**2).sum(-1) * norm
            active = (e >= run.eps_g) & (n > 0)
            grad = np.zeros_like(np.atleast_2d(u))
            if active.any():
                v = 2.0 * norm * (W.T @ r.T).T
                grad = np.atleast_2d(den.vjp(u, t, c, v.reshape(u.shape)))
            scale = np.where(active, run.lam / np.sqrt(np.where(active, e, 1.0)), 0.0)
            step = scale[:, None] * grad
            u_next = u_next - (step if batched else step[0])
            gnorm = np.linalg.norm(grad, axis=-1)
            for b in range(len(e)):
                run.log.append(dict(sample=b, frame=j, step=i, t=float(t), e_t=float(e[b]),
                                    grad_norm=float(gnorm[b]), skipped=not bool(active[b])))
        if not np.all(np.isfinite(u_next)):
            raise NumericalError(f"non-finite state in frame {j} at step {i}", i)
        u = u_next
    return u, traj


def sample_video(run: GuidedRun, schedule: Schedule, denoiser: Denoiser) -> np.ndarray:
    """Sample all frames; returns shape ``(n_frames, [batch,] k)``.

    With ``lam = 0`` this is plain sampling of the warped noise, bit for bit.
    """
    run.frames, run.log, run.trajectory = [], [], None
    for j in range(len(run.noise)):
        u0, traj = _guided_frame(run, j, schedule, denoiser)
        run.frames.append(u0)
        run.trajectory = traj
    return np.stack(run.frames)
