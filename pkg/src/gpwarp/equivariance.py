"""Numerical checks that denoisers, Euler steps and whole sampling chains
commute with translations.

Integer cyclic shifts are the exact test bed: a periodic convolution commutes
with them to rounding error, so any measurable discrepancy exposes a
non-equivariant model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import CirculantDenoiser, Denoiser, Schedule, euler_step, sample_frame
from .flow import FlowSequence, flow_translate_pixels
from .grid import Grid
from .guidance import GuidedRun, sample_video
from .streams import generator


def cyclic_shift(u, grid: Grid, shift) -> np.ndarray:
    """Shift flat fields (``(..., k)``) by ``(dx, dy)`` pixels with wraparound.

    Integer shifts are exact rolls; fractional shifts use periodic bilinear
    interpolation.
    """
    dx, dy = shift
    u = np.asarray(u, dtype=np.float64)
    x = u.reshape(u.shape[:-1] + grid.shape)
    ix, iy = int(np.floor(dx)), int(np.floor(dy))
    fx, fy = dx - ix, dy - iy
    out = 0.0
    for ox, wx in ((ix, 1 - fx), (ix + 1, fx)):
        for oy, wy in ((iy, 1 - fy), (iy + 1, fy)):
            if wx * wy != 0:
                out = out + wx * wy * np.roll(x, (oy, ox), axis=(-2, -1))
    return np.asarray(out).reshape(u.shape)


def _random_shift(rng, grid: Grid):
    return int(rng.integers(grid.width)), int(rng.integers(grid.height))


def check_convolution_equivariance(taps, grid: Grid, n_trials: int = 10, seed: int = 0,
                                   denoiser: Denoiser | None = None, t: float = 1.0) -> float:
    """Max over trials of ``|h(S u) - S h(u)|_inf`` for random cyclic shifts ``S``.

    ``h`` is the circulant denoiser of ``taps`` unless ``denoiser`` is given.
    """
    den = denoiser or CirculantDenoiser(taps, grid)
    rng = generator(seed, 0x6365)
    worst = 0.0
    for _ in range(n_trials):
        u = rng.standard_normal(grid.size)
        s = _random_shift(rng, grid)
        d = den.evaluate(cyclic_shift(u, grid, s), t) - cyclic_shift(den.evaluate(u, t), grid, s)
        worst = max(worst, float(np.abs(d).max()))
    return worst


def check_step_equivariance(denoiser: Denoiser, grid: Grid, t: float, dt: float, shift, n_trials: int = 10,
                            seed: int = 0, schedule: Schedule | None = None) -> float:
    """Max ``|step(S u) - S step(u)|_inf`` for one Euler step and a fixed shift."""
    rng = generator(seed, 0x7365)
    worst = 0.0
    for _ in range(n_trials):
        u = float((schedule or Schedule()).sigma(t)) * rng.standard_normal(grid.size)
        a = euler_step(cyclic_shift(u, grid, shift), t, dt, denoiser, None, schedule)
        b = cyclic_shift(euler_step(u, t, dt, denoiser, None, schedule), grid, shift)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def check_chain_equivariance(denoiser: Denoiser, grid: Grid, schedule: Schedule, shift, seed: int = 0) -> float:
    """End-to-end ``|sample(S u_tau) - S sample(u_tau)|_inf`` for one starting noise."""
    u = float(schedule.sigma(schedule.tau)) * generator(seed, 0x6368).standard_normal(grid.size)
    a, _ = sample_frame(cyclic_shift(u, grid, shift), schedule, denoiser, keep_trajectory=False)
    b, _ = sample_frame(u, schedule, denoiser, keep_trajectory=False)
    return float(np.abs(a - cyclic_shift(b, grid, shift)).max())


def guided_chain_difference(denoiser: Denoiser, grid: Grid, schedule: Schedule, shift, lam: float = 1.0,
                            seed: int = 0) -> float:
    """Max change guidance makes to frame 1 of a two-frame cyclic-shift video.

    Frame 1's noise is the cyclic shift of frame 0's, so an equivariant
    denoiser yields matching outputs, ``e_t = 0`` on every in-frame pixel and
    the guidance step is skipped.
    """
    xi0 = generator(seed, 0x6763).standard_normal(grid.size)
    noise = np.stack([xi0, cyclic_shift(xi0, grid, shift)])
    flows = FlowSequence([flow_translate_pixels(grid, *shift)])
    plain = sample_video(GuidedRun(flows, noise, lam=0.0), schedule, denoiser)
    guided = sample_video(GuidedRun(flows, noise, lam=lam, reduction="sum"), schedule, denoiser)
    return float(np.abs(plain[1] - guided[1]).max())


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    threshold: float
    expect_pass: bool = True

    @property
    def passed(self) -> bool:
        ok = self.measured <= self.threshold
        return ok if self.expect_pass else not ok

    def line(self) -> str:
        rel = "<=" if self.expect_pass else ">"
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<44s} {self.measured:.3e} (want {rel} {self.threshold:.0e})"


def run_checks(resolution: int = 32, steps: int = 25, seed: int = 0) -> list[CheckResult]:
    """The standard battery; the perturbed model is expected to break equivariance."""
    from .diffusion import PerturbedDenoiser, smooth_gain

    grid = Grid(resolution, resolution)
    taps = np.array([[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]])
    circ = CirculantDenoiser(taps, grid)
    pert = PerturbedDenoiser(circ, smooth_gain(grid))
    sched = Schedule(10.0, steps)
    shift = (3, 2)
    return [
        CheckResult("convolution: circulant", check_convolution_equivariance(taps, grid, 10, seed), 1e-12),
        CheckResult("convolution: perturbed (must break)", check_convolution_equivariance(
            taps, grid, 10, seed, denoiser=pert), 1e-3, expect_pass=False),
        CheckResult("step: circulant, integer shift", check_step_equivariance(circ, grid, 1.0, 0.4, shift, 5, seed), 1e-12),
        CheckResult("chain: circulant, integer shift", check_chain_equivariance(circ, grid, sched, shift, seed), 1e-8),
        CheckResult("chain: perturbed (must break)", check_chain_equivariance(pert, grid, sched, shift, seed),
                    1e-3, expect_pass=False),
        CheckResult("guided chain: circulant, change", guided_chain_difference(circ, grid, sched, shift, 1.0, seed), 1e-12),
    ]
