from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate, stats

from gpwarp.diffusion import (GAUSSIAN_LIMIT, CirculantDenoiser, Denoiser, GaussianData, GaussianDenoiser,
                              IdentityDenoiser, MixtureData, MixtureDenoiser, NoiseCov, NumericalError, Observation,
                              PerturbedDenoiser, Schedule, denoising_loss, downsample_operator, euler_step,
                              forward_marginal, forward_sde_simulate, initial_noise, mask_operator, obs_downsample,
                              obs_mask, sample_frame, smooth_gain, tweedie_weighted_score, vjp_fd)
from gpwarp.grid import Field, Grid
from gpwarp.kernels import KernelSpec


def _spd(rng, k, scale=1.0):
    A = rng.standard_normal((k, k))
    return scale * (A @ A.T / k + 0.2 * np.eye(k))


def _mixture(rng, k=4, n=3):
    w = rng.random(n)
    return MixtureData(w / w.sum(), rng.standard_normal((n, k)) * 1.5, np.stack([_spd(rng, k, 0.5) for _ in range(n)]))


def _mixture_logpdf(data, Q, s2, u):
    return np.logaddexp.reduce([np.log(w) + stats.multivariate_normal(m, S + s2 * Q).logpdf(u)
                                for w, m, S in zip(data.weights, data.means, data.covs)])


def _fd_grad(f, u, h=1e-5):
    g = np.zeros_like(u)
    for i in range(len(u)):
        e = np.zeros_like(u)
        e[i] = h
        g[i] = (f(u + e) - f(u - e)) / (2 * h)
    return g


# -- schedule and covariance ------------------------------------------------

def test_schedule_grid():
    s = Schedule(10.0, 4)
    assert s.dt == 2.5 and s.t_min == 2.5
    assert s.times().tolist() == [10.0, 7.5, 5.0, 2.5]
    assert s.sigma(3.0) == 3.0 and s.ratio(4.0) == 0.25
    assert Schedule(1.0, 2, scale=0.0).ratio(0.5) == 0.0
    with pytest.raises(ValueError):
        Schedule(0.0, 3)


def test_noise_cov_kronecker_ops(rng):
    A, B = _spd(rng, 3), _spd(rng, 4)
    q = NoiseCov(factors=(A, B))
    D = np.kron(A, B)
    assert np.allclose(q.dense(), D)
    z = rng.standard_normal((5, 12))
    assert np.allclose(q.apply_pow(z, 1.0), z @ D.T)
    assert np.allclose(q.apply_pow(q.apply_pow(z, 0.5), 0.5), z @ D.T)
    assert np.allclose(q.apply_pow(q.apply_pow(z, -0.5), 0.5), z)
    assert q.logdet() == pytest.approx(np.linalg.slogdet(D)[1])
    with pytest.raises(ValueError):
        NoiseCov()
    with pytest.raises(ValueError):
        NoiseCov(dense=np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_noise_cov_samples(rng):
    D = _spd(rng, 3)
    s = NoiseCov(dense=D).sample(0, 60000)
    assert np.allclose(np.cov(s.T), D, atol=0.03)


def test_data_validation():
    with pytest.raises(ValueError):
        MixtureData([0.5, 0.6], np.zeros((2, 2)), np.eye(2))
    with pytest.raises(ValueError):
        GaussianData(np.zeros(2), np.eye(3))
    with pytest.raises(ValueError):
        GaussianData(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])


# -- observations -------------------------------------------------------------

def test_mask_and_downsample_operators(rng):
    g = Grid(4, 4)
    f = Field(g, rng.standard_normal(g.shape))
    m = rng.random(g.shape) > 0.5
    M = mask_operator(g, m)
    assert np.array_equal(M @ f.flat(), f.flat()[m.reshape(-1)])
    assert np.array_equal(obs_mask(f, m).values[..., 0][m], f.values[..., 0][m])
    assert np.all(obs_mask(f, m).values[..., 0][~m] == 0)
    D = downsample_operator(g, 2)
    assert np.allclose(D @ f.flat(), obs_downsample(f, 2).flat())
    assert obs_downsample(f, 2).flat()[0] == pytest.approx(f.values[:2, :2].mean())
    with pytest.raises(ValueError):
        downsample_operator(g, 3)


def test_observation_noise_and_validation():
    ob = Observation(np.eye(3)[:2], sigma_y=0.1)
    u = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(ob.observe(u), [1.0, 2.0])
    y = ob.observe(u, seed=4)
    assert not np.array_equal(y, [1.0, 2.0]) and np.array_equal(y, ob.observe(u, seed=4))
    with pytest.raises(ValueError):
        Observation(np.eye(2), y=np.zeros(3))
    with pytest.raises(ValueError):
        Observation(np.eye(2), sigma_y=-1)


# -- forward process ------------------------------------------------------------

def test_forward_marginal_covariance(rng):
    D = _spd(rng, 3)
    q = NoiseCov(dense=D)
    u0 = np.tile([1.0, -1.0, 0.5], (40000, 1))
    u = forward_marginal(u0, 2.0, Schedule(), q, seed=1)
    assert np.allclose(u.mean(0), u0[0], atol=0.05)
    assert np.allclose(np.cov(u.T), 4 * D, atol=0.15)


def test_forward_sde_variance_with_left_point_bias():
    q = NoiseCov.identity(2)
    u = forward_sde_simulate(np.zeros((20000, 2)), 2.0, 10, Schedule(), q, seed=3)
    # left-point Euler-Maruyama with sigma = t: tau^2 (1 - 1/n)
    assert u.var(0).mean() == pytest.approx(4.0 * 0.9, rel=0.03)
    assert np.array_equal(forward_sde_simulate(np.ones(2), 1.0, 0, Schedule(), q, 0), np.ones(2))


# -- denoisers ------------------------------------------------------------------

def test_gaussian_denoiser_closed_form(rng):
    k = 5
    S, Q = _spd(rng, k), _spd(rng, k)
    m = rng.standard_normal(k)
    den = GaussianDenoiser(GaussianData(m, S), NoiseCov(dense=Q))
    u = rng.standard_normal((3, k))
    for t in (0.1, 1.0, 7.0):
        ref = m + (u - m) @ np.linalg.solve(S + t**2 * Q, S)  # symmetric: (S (S + t^2 Q)^-1)^T
        assert np.allclose(den.evaluate(u, t), ref, atol=1e-10)
    assert np.array_equal(den.evaluate(u, 0.0), u)


def test_gaussian_denoiser_with_observation(rng):
    k = 6
    S, Q = _spd(rng, k), _spd(rng, k)
    m = rng.standard_normal(k)
    M = rng.standard_normal((3, k))
    y = rng.standard_normal(3)
    sy = 0.3
    den = GaussianDenoiser(GaussianData(m, S), NoiseCov(dense=Q), Observation(M, y, sy))
    # joint Gaussian of (u0, u_t, y), conditioned on (u_t, y)
    t = 1.3
    Sxy = np.hstack([S, S @ M.T])
    Syy = np.block([[S + t**2 * Q, S @ M.T], [M @ S, M @ S @ M.T + sy**2 * np.eye(3)]])
    u = rng.standard_normal(k)
    ref = m + Sxy @ np.linalg.solve(Syy, np.concatenate([u - m, y - M @ m]))
    assert np.allclose(den.evaluate(u, t), ref, atol=1e-10)
    mean, cov = den.posterior()
    K = S @ M.T @ np.linalg.inv(M @ S @ M.T + sy**2 * np.eye(3))
    assert np.allclose(mean, m + K @ (y - M @ m), atol=1e-10)
    assert np.allclose(cov, S - K @ M @ S, atol=1e-10)
    # c may pass a fresh y or a whole observation
    y2 = y + 1
    assert np.allclose(den.evaluate(u, t, y2), den.evaluate(u, t, Observation(M, y2, sy)))


def test_mixture_denoiser_matches_brute_force(rng):
    data = _mixture(rng)
    Q = _spd(rng, 4)
    den = MixtureDenoiser(data, NoiseCov(dense=Q))
    u, t = rng.standard_normal(4), 0.8
    logs = [np.log(w) + stats.multivariate_normal(mu, S + t**2 * Q).logpdf(u)
            for w, mu, S in zip(data.weights, data.means, data.covs)]
    r = np.exp(np.array(logs) - np.logaddexp.reduce(logs))
    ref = sum(ri * (mu + S @ np.linalg.solve(S + t**2 * Q, u - mu))
              for ri, mu, S in zip(r, data.means, data.covs))
    assert np.allclose(den.evaluate(u, t), ref, atol=1e-10)
    assert np.allclose(den.responsibilities(u, t), r, atol=1e-10)
    assert den.log_density(u, t) == pytest.approx(np.logaddexp.reduce(logs), abs=1e-9)


@pytest.mark.parametrize("t", [0.3, 1.0, 3.0])
def test_tweedie_identity_against_finite_differences(rng, t):
    data = _mixture(rng, k=4, n=3)
    Q = _spd(rng, 4)
    den = MixtureDenoiser(data, NoiseCov(dense=Q))
    for _ in range(5):
        u = rng.standard_normal(4) * 2
        g = _fd_grad(lambda x: _mixture_logpdf(data, Q, t**2, x), u)
        lhs = tweedie_weighted_score(den, u, t)
        assert np.linalg.norm(lhs - Q @ g) <= 1e-4 * np.linalg.norm(Q @ g)


def test_mixture_with_observation_tweedie(rng):
    data = _mixture(rng, k=4, n=2)
    Q = _spd(rng, 4)
    M = rng.standard_normal((2, 4))
    ob = Observation(M, rng.standard_normal(2), 0.5)
    den = MixtureDenoiser(data, NoiseCov(dense=Q), ob)
    t, u = 0.9, rng.standard_normal(4)
    g = _fd_grad(lambda x: den.log_density(x, t), u)
    assert np.allclose(tweedie_weighted_score(den, u, t), Q @ g, rtol=1e-5, atol=1e-7)


def test_one_dimensional_quadrature_oracle():
    data = MixtureData([0.3, 0.7], [[-1.0], [2.0]], [[[0.25]], [[0.5]]])
    den = MixtureDenoiser(data, NoiseCov.identity(1))
    x = np.linspace(-12, 12, 10001)
    prior = 0.3 * stats.norm.pdf(x, -1, 0.5) + 0.7 * stats.norm.pdf(x, 2, np.sqrt(0.5))
    for u, t in ((0.3, 0.5), (-2.0, 1.5), (4.0, 0.2)):
        post = prior * stats.norm.pdf(u, x, t)
        ref = integrate.trapezoid(x * post, x) / integrate.trapezoid(post, x)
        assert den.evaluate(np.array([u]), t)[0] == pytest.approx(ref, rel=1e-4)


def test_vjp_matches_finite_differences(rng):
    data = _mixture(rng, k=5, n=3)
    Q = _spd(rng, 5)
    for den in (MixtureDenoiser(data, NoiseCov(dense=Q)),
                GaussianDenoiser(GaussianData(data.means[0], data.covs[0]), NoiseCov(dense=Q)),
                PerturbedDenoiser(MixtureDenoiser(data, NoiseCov(dense=Q)), np.linspace(0.8, 1.2, 5))):
        u, v, t = rng.standard_normal(5), rng.standard_normal(5), 0.7
        assert np.allclose(den.vjp(u, t, None, v), vjp_fd(den, u, t, None, v), rtol=1e-6, atol=1e-8)


def test_default_vjp_falls_back_to_finite_differences(rng):
    class Square(Denoiser):
        k = 3

        def evaluate(self, u, t, c=None):
            return np.asarray(u) ** 2

    u, v = rng.standard_normal(3), rng.standard_normal(3)
    assert np.allclose(Square().vjp(u, 1.0, None, v), 2 * u * v, atol=1e-8)


def test_batched_evaluation_matches_rows(rng):
    data = _mixture(rng, k=4, n=2)
    den = MixtureDenoiser(data, NoiseCov(dense=_spd(rng, 4)))
    u = rng.standard_normal((6, 4))
    batch = den.evaluate(u, 0.5)
    assert np.allclose(batch, np.stack([den.evaluate(r, 0.5) for r in u]), atol=1e-14)


def test_responsibilities_underflow_fallback():
    data = MixtureData([0.5, 0.5], [[0.0], [1.0]], [[[1e-4]], [[1e-4]]])
    den = MixtureDenoiser(data, NoiseCov.identity(1))
    r = den.responsibilities(np.array([1e4]), 1e-3)
    assert np.array_equal(r, [0.0, 1.0])
    assert np.all(np.isfinite(den.evaluate(np.array([1e4]), 1e-3)))


def test_low_rank_prior(rng):
    k = 6
    L = rng.standard_normal((k, 2))
    S = L @ L.T
    Q = _spd(rng, k)
    den = GaussianDenoiser(GaussianData(np.zeros(k), S), NoiseCov(dense=Q))
    u, t = rng.standard_normal(k), 0.6
    ref = S @ np.linalg.solve(S + t**2 * Q, u)
    assert np.allclose(den.evaluate(u, t), ref, atol=1e-10)


def test_size_limit():
    too_big = SimpleNamespace(k=GAUSSIAN_LIMIT + 1)
    with pytest.raises(ValueError):
        MixtureDenoiser(too_big, NoiseCov.identity(2))
    with pytest.raises(ValueError):
        MixtureDenoiser(MixtureData([1.0], [[0.0, 0.0]], np.eye(2)), NoiseCov.identity(3))


def test_analytic_denoiser_beats_perturbed_linear_ones(rng):
    k = 3
    S, Q = _spd(rng, k), np.eye(k)
    data = GaussianData(np.zeros(k), S)
    sch = Schedule(3.0, 10)
    best = GaussianDenoiser(data, NoiseCov(dense=Q), schedule=sch)
    base = denoising_loss(best, data, NoiseCov(dense=Q), sch, 3000, seed=0)
    for i in range(10):
        gain = 1 + 0.1 * np.random.default_rng(i).standard_normal(k)
        other = PerturbedDenoiser(best, gain)
        assert base <= denoising_loss(other, data, NoiseCov(dense=Q), sch, 3000, seed=0)


# -- circulant and perturbed ------------------------------------------------------

def test_circulant_delta_and_adjoint(rng):
    g = Grid(6, 5)
    u, v = rng.standard_normal(g.size), rng.standard_normal(g.size)
    assert np.array_equal(CirculantDenoiser([[1.0]], g).evaluate(u, 1.0), u)
    den = CirculantDenoiser(rng.standard_normal((3, 5)), g)
    assert den.evaluate(u, 1.0) @ v == pytest.approx(u @ den.vjp(u, 1.0, None, v))
    with pytest.raises(ValueError):
        CirculantDenoiser(np.ones((2, 2)), g)


def test_perturbed_gain_one_is_base(rng):
    g = Grid(4, 4)
    base = CirculantDenoiser([[0.1, 0.8, 0.1]], g)
    u = rng.standard_normal(g.size)
    assert np.array_equal(PerturbedDenoiser(base, np.ones(g.size)).evaluate(u, 1.0), base.evaluate(u, 1.0))
    gain = smooth_gain(g)
    assert gain.min() >= 0.8 and gain.max() <= 1.2
    with pytest.raises(ValueError):
        PerturbedDenoiser(base, np.ones(3))


# -- sampler ----------------------------------------------------------------------

def test_euler_step_and_last_step_returns_denoiser_output(rng):
    den = IdentityDenoiser(3)
    u = rng.standard_normal(3)
    assert np.array_equal(euler_step(u, 1.0, 0.5, den), u)
    circ = CirculantDenoiser([[0.2, 0.6, 0.2]], Grid(3, 1))
    sch = Schedule(4.0, 4)
    # from t = dt the step lands on u + (h - u) = h
    h = circ.evaluate(u, 1.0)
    assert np.allclose(euler_step(u, 1.0, 1.0, circ, schedule=sch), h)
    assert np.array_equal(euler_step(u, 1.0, 0.0, circ), u)


def test_sample_frame_trajectory_and_final_value(rng):
    g = Grid(4, 4)
    circ = CirculantDenoiser([[0.0, 0.1, 0.0], [0.1, 0.6, 0.1], [0.0, 0.1, 0.0]], g)
    sch = Schedule(10.0, 5)
    xi = rng.standard_normal(g.size)
    u0, traj = sample_frame(initial_noise(xi, sch), sch, circ)
    assert traj.shape == (5, g.size)
    assert np.allclose(u0, traj[-1])
    assert sample_frame(initial_noise(xi, sch), sch, circ, keep_trajectory=False)[1] is None


def test_sample_frame_raises_on_nan():
    class Bad(Denoiser):
        k = 2

        def evaluate(self, u, t, c=None):
            return np.full(2, np.nan) if t < 5 else np.asarray(u)

    with pytest.raises(NumericalError) as exc:
        sample_frame(np.zeros(2), Schedule(10.0, 4), Bad())
    assert exc.value.step == 3  # times 10, 7.5, 5, 2.5


def test_probability_flow_gaussian_marginal():
    rng = np.random.default_rng(0)
    k = 4
    S = _spd(rng, k)
    m = rng.standard_normal(k)
    Q = _spd(rng, k)
    noise = NoiseCov(dense=Q)
    sch = Schedule(10.0, 50)
    den = GaussianDenoiser(GaussianData(m, S), noise, schedule=sch)
    xi = noise.sample(1, 4000)
    # start from the exact marginal at tau, not just sigma(tau) xi
    start = GaussianData(m, S).sample(4000, 2) + sch.sigma(sch.tau) * xi
    out, _ = sample_frame(start, sch, den, keep_trajectory=False)
    assert np.linalg.norm(out.mean(0) - m) / np.linalg.norm(m) < 0.1
    assert np.linalg.norm(np.cov(out.T) - S) / np.linalg.norm(S) < 0.1


def test_tweedie_needs_positive_time():
    with pytest.raises(ValueError):
        tweedie_weighted_score(IdentityDenoiser(2), np.zeros(2), 0.0)


def test_noise_cov_from_grid_is_rff_covariance():
    g = Grid(4, 3)
    q = NoiseCov.from_grid(KernelSpec(0.3, 2.0), g)
    from gpwarp.kernels import rff_covariance
    assert np.allclose(q.dense(), rff_covariance(KernelSpec(0.3, 2.0), g.points(), g.points()), atol=1e-14)
