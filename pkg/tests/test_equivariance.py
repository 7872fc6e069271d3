import numpy as np
import pytest

from gpwarp.diffusion import CirculantDenoiser, IdentityDenoiser, PerturbedDenoiser, Schedule, smooth_gain
from gpwarp.equivariance import (CheckResult, check_chain_equivariance, check_convolution_equivariance,
                                 check_step_equivariance, cyclic_shift, guided_chain_difference, run_checks)
from gpwarp.grid import Grid

TAPS = np.array([[0.0, 0.2, 0.0], [0.2, 0.3, 0.2], [0.0, 0.1, 0.0]])


def test_cyclic_shift_integer_and_fractional(rng):
    g = Grid(6, 4)
    u = rng.standard_normal(g.size)
    assert np.array_equal(cyclic_shift(u, g, (2, 1)), np.roll(u.reshape(g.shape), (1, 2), (0, 1)).reshape(-1))
    half = cyclic_shift(u, g, (0.5, 0))
    x = u.reshape(g.shape)
    assert np.allclose(half, (0.5 * x + 0.5 * np.roll(x, 1, axis=1)).reshape(-1))
    assert cyclic_shift(np.stack([u, u]), g, (1, 0)).shape == (2, g.size)


def test_delta_and_circulant_filters_commute():
    g = Grid(12, 10)
    assert check_convolution_equivariance([[1.0]], g) == 0.0
    assert check_convolution_equivariance(TAPS, g) <= 1e-12


def test_perturbed_denoiser_breaks_commutation():
    g = Grid(12, 12)
    pert = PerturbedDenoiser(CirculantDenoiser(TAPS, g), smooth_gain(g))
    assert check_convolution_equivariance(TAPS, g, denoiser=pert) >= 1e-3


def test_step_equivariance():
    g = Grid(10, 10)
    circ = CirculantDenoiser(TAPS, g)
    assert check_step_equivariance(circ, g, 2.0, 0.4, (3, 2)) <= 1e-12
    assert check_step_equivariance(IdentityDenoiser(g.size), g, 2.0, 0.4, (0.3, 0.6)) == 0.0
    # periodic bilinear shifts are circulant too, so they commute with the filter up to rounding
    assert check_step_equivariance(circ, g, 2.0, 0.4, (0.5, 0.25)) <= 1e-12


def test_chain_equivariance_and_per_step_bound():
    g = Grid(16, 16)
    circ = CirculantDenoiser(TAPS, g)
    sch = Schedule(10.0, 25)
    chain = check_chain_equivariance(circ, g, sch, (5, 3))
    step = check_step_equivariance(circ, g, 1.0, sch.dt, (5, 3))
    assert chain <= 1e-8
    assert chain <= 10 * max(sch.n_steps * step, np.finfo(float).eps * 25)
    pert = PerturbedDenoiser(circ, smooth_gain(g))
    assert check_chain_equivariance(pert, g, sch, (5, 3)) >= 1e-3


def test_guided_chain_with_equivariant_denoiser_changes_nothing():
    g = Grid(16, 16)
    assert guided_chain_difference(CirculantDenoiser(TAPS, g), g, Schedule(10.0, 10), (2, 1)) <= 1e-12


def test_check_result_lines():
    ok = CheckResult("x", 1e-13, 1e-12)
    broken = CheckResult("y", 0.5, 1e-3, expect_pass=False)
    assert ok.passed and broken.passed
    assert ok.line().startswith("PASS") and "want >" in broken.line()
    assert not CheckResult("z", 1.0, 1e-3).passed


def test_run_checks_all_pass():
    results = run_checks(resolution=16, steps=10)
    assert len(results) == 6 and all(r.passed for r in results)
