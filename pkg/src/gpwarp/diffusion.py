"""Variance-exploding diffusion with correlated noise, analytic denoisers and
the Euler probability-flow sampler.

The forward process adds ``sigma(t) * xi`` with ``xi ~ N(0, Q)``. For a
denoiser ``h(u, t) ~ E[u0 | u_t = u]`` the Q-weighted score is
``(h - u) / sigma^2`` and the probability-flow ODE reads
``du/dt = -(sigma'/sigma) (h - u)``. One Euler step backwards in time is

    u_{t-dt} = u_t + dt * (sigma'(t)/sigma(t)) * (h(u_t, t) - u_t),

so with ``sigma(t) = t`` the last step from ``t = dt`` lands exactly on
``h``.

Denoisers act on flat row-major vectors with an optional leading batch
axis, shape ``(..., k)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .grid import Field, Grid
from .streams import generator

GAUSSIAN_LIMIT = 4096
UNDERFLOW_LOG = -700.0
EIG_FLOOR = 1e-9


class NumericalError(ArithmeticError):
    """Non-finite values appeared during a rollout."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class Schedule:
    """``sigma(t) = scale * t`` on the linear grid ``tau, tau - dt, ..., dt``."""

    tau: float = 10.0
    n_steps: int = 25
    scale: float = 1.0

    def __post_init__(self):
        if not self.tau > 0 or self.n_steps < 1 or self.scale < 0:
            raise ValueError("need tau > 0, n_steps >= 1 and scale >= 0")

    @property
    def dt(self) -> float:
        return self.tau / self.n_steps

    @property
    def t_min(self) -> float:
        return self.dt

    def times(self) -> np.ndarray:
        return self.tau - self.dt * np.arange(self.n_steps)

    def sigma(self, t):
        return self.scale * np.asarray(t, dtype=np.float64)

    def sigma_dot(self, t):
        return self.scale * np.ones_like(np.asarray(t, dtype=np.float64))

    def ratio(self, t: float) -> float:
        """``sigma'(t) / sigma(t)``; zero for the noiseless schedule."""
        return 0.0 if self.scale == 0 else 1.0 / t


# -- covariances ------------------------------------------------------------

class NoiseCov:
    """Noise covariance ``Q``, dense or as a row-major Kronecker product ``kron(Qy, Qx)``.

    Eigenvalues below ``EIG_FLOOR`` times the largest are floored so that
    ``Q^(-1/2)`` stays bounded.
    """

    def __init__(self, dense=None, factors=None):
        if (dense is None) == (factors is None):
            raise ValueError("give either a dense matrix or Kronecker factors")
        if dense is not None:
            Q = np.asarray(dense, dtype=np.float64)
            self.parts = [Q]
        else:
            self.parts = [np.asarray(f, dtype=np.float64) for f in factors]
        self._eig = []
        for P in self.parts:
            if P.ndim != 2 or P.shape[0] != P.shape[1] or not np.allclose(P, P.T, atol=1e-12):
                raise ValueError("covariance factors must be symmetric square matrices")
            q, V = linalg.eigh(P)
            q = np.maximum(q, EIG_FLOOR * max(q[-1], 1e-300))
            self._eig.append((q, V))
        self.k = int(np.prod([P.shape[0] for P in self.parts]))

    @classmethod
    def from_grid(cls, spec, grid: Grid, rff: bool = True) -> "NoiseCov":
        from .kernels import grid_covariance_factors
        return cls(factors=grid_covariance_factors(spec, grid, rff=rff))

    @classmethod
    def identity(cls, k: int) -> "NoiseCov":
        return cls(dense=np.eye(k))

    def dense(self) -> np.ndarray:
        out = np.ones((1, 1))
        for P in self.parts:
            out = np.kron(out, P)
        return out

    def logdet(self) -> float:
        # log det kron(A, B) = n_B log det A + n_A log det B
        total = 0.0
        for q, _ in self._eig:
            total += np.log(q).sum() * (self.k // len(q))
        return float(total)

    def sample(self, seed: int, n: int | None = None) -> np.ndarray:
        """Draws from ``N(0, Q)`` via the symmetric square root, shape ``(k,)`` or ``(n, k)``."""
        z = generator(seed, 0x7163).standard_normal((1 if n is None else n, self.k))
        out = self.apply_sqrt(z)
        return out[0] if n is None else out

    def apply_sqrt(self, z: np.ndarray) -> np.ndarray:
        return self.apply_pow(z, 0.5)

    def apply_pow(self, z: np.ndarray, p: float) -> np.ndarray:
        """``Q^p`` applied along the last axis of ``z`` (factor by factor)."""
        z = np.asarray(z, dtype=np.float64)
        shape = z.shape
        sizes = [len(q) for q, _ in self._eig]
        x = z.reshape(-1, *sizes)
        for axis, (q, V) in enumerate(self._eig, start=1):
            S = (V * q**p) @ V.T
            x = np.moveaxis(np.tensordot(x, S, axes=([axis], [1])), -1, axis)
        return x.reshape(shape)


# -- data models ------------------------------------------------------------

def _sym(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise ValueError("covariance must be symmetric")
    return 0.5 * (A + A.T)


@dataclass(frozen=True, eq=False)
class GaussianData:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        S = _sym(self.cov)
        if S.shape != (len(m), len(m)):
            raise ValueError("mean and covariance sizes differ")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", S)

    @property
    def k(self) -> int:
        return len(self.mean)

    def sample(self, n: int, seed: int) -> np.ndarray:
        w, V = linalg.eigh(self.cov)
        L = V * np.sqrt(np.clip(w, 0, None))
        return self.mean + generator(seed, 0x6461).standard_normal((n, self.k)) @ L.T

    def as_mixture(self) -> "MixtureData":
        return MixtureData(np.ones(1), self.mean[None], self.cov[None])


@dataclass(frozen=True, eq=False)
class MixtureData:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        c = np.asarray(self.covs, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None, None]
        if c.ndim == 2:
            c = np.broadcast_to(c, (len(w),) + c.shape)
        if len(w) < 1 or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if m.shape[0] != len(w) or c.shape != (len(w), m.shape[1], m.shape[1]):
            raise ValueError("inconsistent mixture shapes")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", np.stack([_sym(S) for S in c]))

    @property
    def k(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = generator(seed, 0x6d78)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.k))
        out = np.empty((n, self.k))
        for i in range(len(self.weights)):
            sel = comp == i
            w, V = linalg.eigh(self.covs[i])
            out[sel] = self.means[i] + z[sel] @ (V * np.sqrt(np.clip(w, 0, None))).T
        return out


# -- observations -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Observation:
    """Linear observation ``y = M u0 + sigma_y * eta``; ``y`` may be supplied per call."""

    operator: np.ndarray
    y: np.ndarray | None = None
    sigma_y: float = 0.0

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.operator, dtype=np.float64))
        object.__setattr__(self, "operator", M)
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64)
            if y.shape[-1] != M.shape[0]:
                raise ValueError("observation vector does not match the operator")
            object.__setattr__(self, "y", y)

    def observe(self, u0: np.ndarray, seed: int | None = None) -> np.ndarray:
        y = np.asarray(u0) @ self.operator.T
        if self.sigma_y > 0 and seed is not None:
            y = y + self.sigma_y * generator(seed, 0x6f62).standard_normal(y.shape)
        return y

    def with_y(self, y) -> "Observation":
        return Observation(self.operator, y, self.sigma_y)


def mask_operator(grid: Grid, mask) -> np.ndarray:
    """Rows selecting the pixels where ``mask`` is true (row-major)."""
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.size != grid.size:
        raise ValueError("mask does not match grid")
    return np.eye(grid.size)[m]


def downsample_operator(grid: Grid, s: int) -> np.ndarray:
    """``s x s`` block averaging onto the coarse grid (row-major)."""
    if s < 1 or grid.width % s or grid.height % s:
        raise ValueError(f"factor {s} does not divide the grid {grid.width}x{grid.height}")
    H, W = grid.shape
    rows = (np.arange(H)[:, None] // s) * (W // s) + np.arange(W)[None, :] // s
    M = np.zeros((grid.size // (s * s), grid.size))
    M[rows.reshape(-1), np.arange(grid.size)] = 1.0 / (s * s)
    return M


def obs_downsample(field: Field, s: int) -> Field:
    g = field.grid
    if s < 1 or g.width % s or g.height % s:
        raise ValueError(f"factor {s} does not divide the grid {g.width}x{g.height}")
    v = field.values.reshape(g.height // s, s, g.width // s, s, field.channels).mean(axis=(1, 3))
    return Field(Grid(g.width // s, g.height // s), v)


def obs_mask(field: Field, mask) -> Field:
    """Keep values where ``mask`` is true, zero elsewhere."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != field.grid.shape:
        raise ValueError("mask does not match grid")
    return Field(field.grid, np.where(m[..., None], field.values, 0.0))


# -- forward process ----------------------------------------------------------

def _noise_draw(noise, seed: int, n: int | None):
    if isinstance(noise, NoiseCov):
        return noise.sample(seed, n)
    return noise(seed) if n is None else np.stack([noise((seed, i)) for i in range(n)])


def forward_marginal(u0, t: float, schedule: Schedule, noise, seed: int) -> np.ndarray:
    """``u0 + sigma(t) xi`` with ``xi ~ N(0, Q)`` drawn by ``noise``.

    ``noise`` is a :class:`NoiseCov` or a callable ``seed -> xi``. A 2-D
    ``u0`` is treated as a batch with one independent ``xi`` per row.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    xi = _noise_draw(noise, seed, u0.shape[0] if u0.ndim == 2 else None)
    return u0 + schedule.sigma(t) * xi


def forward_sde_simulate(u0, tau: float, n_substeps: int, schedule: Schedule, noise: NoiseCov, seed: int) -> np.ndarray:
    """Euler-Maruyama for ``du = sqrt(2 sigma sigma') Q^(1/2) dW`` from 0 to ``tau``.

    Left-point rule, so with ``sigma(t) = t`` the simulated variance is
    ``tau^2 (1 - 1/n)``; the bias vanishes as ``n_substeps`` grows.
    """
    u = np.array(u0, dtype=np.float64)
    if n_substeps <= 0:
        return u
    dt = tau / n_substeps
    rng = generator(seed, 0x7364)
    for i in range(n_substeps):
        t = i * dt
        rate = 2.0 * schedule.sigma(t) * schedule.sigma_dot(t)
        z = rng.standard_normal(u.shape)
        u = u + math.sqrt(rate * dt) * noise.apply_sqrt(z)
    return u


# -- denoisers ----------------------------------------------------------------

class Denoiser:
    """``evaluate(u, t, c) ~ E[u0 | u_t = u, c]`` and its vector-Jacobian product."""

    k: int

    def evaluate(self, u, t: float, c=None) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, u, t: float, c, v) -> np.ndarray:
        """``v^T dh/du``; central differences unless a subclass knows better."""
        return vjp_fd(self, u, t, c, v)


def vjp_fd(den: Denoiser, u, t, c, v, step: float = 1e-5) -> np.ndarray:
    """Finite-difference VJP, one pair of evaluations per coordinate (cost ``2k``)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(u.shape, v.shape))
    for i in range(u.shape[-1]):
        e = np.zeros(u.shape[-1])
        e[i] = step
        d = (den.evaluate(u + e, t, c) - den.evaluate(u - e, t, c)) / (2 * step)
        out[..., i] = (d * v).sum(-1)
    return out


class IdentityDenoiser(Denoiser):
    def __init__(self, k: int):
        self.k = k

    def evaluate(self, u, t, c=None):
        return np.array(u, dtype=np.float64)

    def vjp(self, u, t, c, v):
        return np.array(v, dtype=np.float64)


def low_rank_factor(cov: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """``L`` with ``L L^T = cov`` up to eigenvalues below ``rel_tol`` of the largest."""
    w, V = linalg.eigh(cov)
    keep = w > rel_tol * max(w[-1], 1e-300)
    return V[:, keep] * np.sqrt(w[keep])


def _factor_of(data, i: int) -> np.ndarray:
    # memoized per data object so denoisers for different observations share it
    cache = data.__dict__.setdefault("_factor_cache", {})
    if i not in cache:
        covs = data.covs
        same = next((j for j in cache if np.array_equal(covs[j], covs[i])), None)
        cache[i] = cache[same] if same is not None else low_rank_factor(covs[i])
    return cache[i]


class _Posterior:
    """One Gaussian prior ``N(m, L L^T)`` conditioned on ``y = M u0 + sy eta``.

    The conditioned covariance ``S'`` has the same column space as ``L``.
    Writing ``Q^(-1/2) S' Q^(-1/2) = U diag(lam) U^T`` (thin, rank ``r``),

        E[u0 | u_t] = m' + B diag(lam / (lam + s^2)) C (u_t - m'),

    with ``B = Q^(1/2) U`` and ``C = U^T Q^(-1/2)``; directions outside
    ``U`` carry no prior variance and are set to ``m'``. Only ``U`` is
    stored; the Kronecker factors of ``Q`` apply the powers on the fly.
    """

    def __init__(self, mean, L, noise: NoiseCov, operator=None, sigma_y: float = 0.0):
        self.prior_mean = mean
        self.noise = noise
        self.observed = operator is not None
        if not self.observed:
            Lp = L
        else:
            M = np.asarray(operator, dtype=np.float64)
            Uy, s, Vt = linalg.svd(M @ L, full_matrices=False)
            sy2 = float(sigma_y) ** 2
            den = s**2 + sy2
            shrink = np.where(den > 0, sy2 / np.where(den > 0, den, 1.0), 1.0)
            Lp = L @ (Vt.T * np.sqrt(shrink)) @ Vt + L - (L @ Vt.T) @ Vt
            self.M = M
            self.Uy = Uy
            self.gain = (L @ Vt.T) * np.where(den > 0, s / np.where(den > 0, den, 1.0), 0.0)
            self.y_den = den
            self.sy2 = max(sy2, 1e-12)
            self._y_key = None
        K = noise.apply_pow(Lp.T, -0.5).T
        U, sv, _ = linalg.svd(K, full_matrices=False)
        keep = sv > 1e-7 * max(sv[0] if len(sv) else 0.0, 1e-300)
        self.U = U[:, keep]
        self.lam = sv[keep] ** 2
        self.k = len(mean)
        self.rank = len(self.lam)

    def mean(self, y) -> np.ndarray:
        """Posterior mean of ``u0`` given ``y`` (the prior mean when unobserved)."""
        if not self.observed:
            return self.prior_mean
        if y is None:
            raise ValueError("observation vector missing: pass it as the conditioning c")
        y = np.asarray(y, dtype=np.float64)
        key = (y.shape, y.tobytes())
        if key != self._y_key:
            d = y - self.prior_mean @ self.M.T
            a = d @ self.Uy
            self._mean = self.prior_mean + a @ self.gain.T
            quad = (a**2 / np.maximum(self.y_den, 1e-300)).sum(-1) + ((d**2).sum(-1) - (a**2).sum(-1)) / self.sy2
            n = d.shape[-1]
            logdet = np.log(np.maximum(self.y_den, 1e-300)).sum() + (n - len(self.y_den)) * math.log(self.sy2)
            self._ylog = -0.5 * (quad + logdet + n * math.log(2 * math.pi))
            self._y_key = key
        return self._mean

    def y_loglik(self, y):
        """``log N(y; M m, M L L^T M^T + sy^2 I)``; zero when unobserved."""
        if not self.observed:
            return 0.0
        self.mean(y)
        return self._ylog

    def factor(self, t2):
        return self.lam / (self.lam + t2)

    def with_mean(self, mean) -> "_Posterior":
        """Same covariance and observation, different prior mean."""
        other = copy.copy(self)
        other.prior_mean = mean
        other._y_key = None
        return other

    def B(self) -> np.ndarray:
        return self.noise.apply_pow(self.U.T, 0.5).T

    def evaluate(self, u, m, t2):
        if t2 == 0:
            return np.array(u, dtype=np.float64)
        w = self.noise.apply_pow(u - m, -0.5) @ self.U
        return m + self.noise.apply_pow((w * self.factor(t2)) @ self.U.T, 0.5)

    def vjp(self, v, t2):
        if t2 == 0:
            return np.array(v, dtype=np.float64)
        w = self.noise.apply_pow(np.asarray(v, dtype=np.float64), 0.5) @ self.U
        return self.noise.apply_pow((w * self.factor(t2)) @ self.U.T, -0.5)

    def _whiten(self, u, m):
        q = self.noise.apply_pow(u - m, -0.5)
        return q, q @ self.U

    def loglik(self, u, m, t2):
        """``log N(u; m, S' + t2 Q)`` for ``t2 > 0``."""
        q, a = self._whiten(u, m)
        d = self.lam + t2
        quad = (a * a / d).sum(-1) + ((q * q).sum(-1) - (a * a).sum(-1)) / t2
        logdet = np.log(d).sum() + (self.k - self.rank) * math.log(t2) + self.noise.logdet()
        return -0.5 * (quad + logdet + self.k * math.log(2 * math.pi))

    def score(self, u, m, t2):
        """``grad_u log N(u; m, S' + t2 Q)``."""
        q, a = self._whiten(u, m)
        inner = (a / (self.lam + t2)) @ self.U.T + (q - a @ self.U.T) / t2
        return -self.noise.apply_pow(inner, -0.5)


class MixtureDenoiser(Denoiser):
    """Exact posterior mean for a Gaussian mixture prior.

    ``E[u0 | u_t, y] = sum_i r_i E_i[u0 | u_t, y]`` with responsibilities
    ``r_i ~ pi_i N(y; M m_i, M S_i M^T + sy^2) N(u_t; m'_i, S'_i + s^2 Q)``
    combined in log space.

    The conditioning ``c`` is ``None``, an observed vector ``y`` for the
    default observation ``obs``, or an :class:`Observation` carrying its own
    operator (posteriors are built once per operator and cached).
    """

    def __init__(self, data: MixtureData, noise: NoiseCov, obs: Observation | None = None, schedule: Schedule | None = None):
        self.k = data.k
        if self.k > GAUSSIAN_LIMIT:
            raise ValueError(f"dense Gaussian denoisers are limited to k <= {GAUSSIAN_LIMIT}, got {self.k}")
        if noise.k != self.k:
            raise ValueError("noise covariance does not match the data dimension")
        self.schedule = schedule or Schedule()
        self.data = data
        self.noise = noise
        self.obs = obs
        self.log_weights = np.log(np.where(data.weights > 0, data.weights, 1e-300))
        self._cache = {}
        self._posteriors(obs)

    def _posteriors(self, obs: Observation | None):
        key = None if obs is None else (id(obs.operator), obs.sigma_y)
        if key not in self._cache:
            if obs is not None and obs.operator.shape[1] != self.k:
                raise ValueError("observation operator does not match the data dimension")
            op = None if obs is None else obs.operator
            sy = 0.0 if obs is None else obs.sigma_y
            posts, built = [], {}
            for i, m in enumerate(self.data.means):
                L = _factor_of(self.data, i)
                if id(L) in built:  # shared covariance: reuse the factorization
                    posts.append(built[id(L)].with_mean(m))
                else:
                    built[id(L)] = _Posterior(m, L, self.noise, op, sy)
                    posts.append(built[id(L)])
            self._cache[key] = (op, posts)  # keep op alive so its id stays unique
        return self._cache[key][1]

    def _resolve(self, c):
        if isinstance(c, Observation):
            return self._posteriors(c), c.y
        if self.obs is None:
            return self._posteriors(None), None
        return self._posteriors(self.obs), self.obs.y if c is None else c

    def _parts(self, u, t, c):
        u = np.asarray(u, dtype=np.float64)
        t2 = float(self.schedule.sigma(t)) ** 2
        posts, y = self._resolve(c)
        means = [p.mean(y) for p in posts]
        if len(posts) == 1:
            return u, t2, posts, means, np.ones((1,) + u.shape[:-1])
        if t2 == 0:
            raise ValueError("mixture responsibilities need sigma(t) > 0")
        logs = np.stack([lw + p.y_loglik(y) + p.loglik(u, m, t2)
                         for lw, p, m in zip(self.log_weights, posts, means)])
        top = logs.max(axis=0)
        if np.all(top < UNDERFLOW_LOG):
            # every responsibility underflows: hard assignment to the best component
            r = (logs == top).astype(np.float64)
            r /= r.sum(axis=0)
        else:
            r = np.exp(logs - special.logsumexp(logs, axis=0))
        return u, t2, posts, means, r

    def responsibilities(self, u, t, c=None) -> np.ndarray:
        return self._parts(u, t, c)[4]

    def evaluate(self, u, t, c=None):
        u, t2, posts, means, r = self._parts(u, t, c)
        out = 0.0
        for ri, p, m in zip(r, posts, means):
            out = out + ri[..., None] * p.evaluate(u, m, t2)
        return np.asarray(out)

    def vjp(self, u, t, c, v):
        u, t2, posts, means, r = self._parts(u, t, c)
        v = np.asarray(v, dtype=np.float64)
        if len(posts) == 1:
            return posts[0].vjp(v, t2)
        hs = [p.evaluate(u, m, t2) for p, m in zip(posts, means)]
        gs = [p.score(u, m, t2) for p, m in zip(posts, means)]
        gbar = sum(ri[..., None] * g for ri, g in zip(r, gs))
        out = 0.0
        for ri, p, h, g in zip(r, posts, hs, gs):
            # d r_i / du = r_i (g_i - gbar)
            out = out + ri[..., None] * p.vjp(v, t2) + (ri * (v * h).sum(-1))[..., None] * (g - gbar)
        return np.asarray(out)

    def log_density(self, u, t, c=None) -> np.ndarray:
        """``log p(u_t = u, y)``: the noisy-state density (joint with ``y`` when observed)."""
        u = np.asarray(u, dtype=np.float64)
        t2 = float(self.schedule.sigma(t)) ** 2
        posts, y = self._resolve(c)
        logs = np.stack([lw + p.y_loglik(y) + p.loglik(u, p.mean(y), t2)
                         for lw, p in zip(self.log_weights, posts)])
        return special.logsumexp(logs, axis=0)


class GaussianDenoiser(MixtureDenoiser):
    """``m' + S'(S' + sigma^2 Q)^-1 (u - m')`` for a Gaussian prior, where the
    primed quantities are conditioned on the linear observation if any."""

    def __init__(self, data: GaussianData, noise: NoiseCov, obs: Observation | None = None, schedule: Schedule | None = None):
        super().__init__(data.as_mixture(), noise, obs, schedule)
        self.gaussian = data

    def posterior(self, c=None):
        """Exact mean and covariance of ``u0`` given the observation (the prior if none)."""
        posts, y = self._resolve(c)
        p = posts[0]
        B = p.B()
        return p.mean(y), (B * p.lam) @ B.T


def gaussian_denoiser(data: GaussianData, noise: NoiseCov, obs: Observation | None = None, schedule=None):
    return GaussianDenoiser(data, noise, obs, schedule)


def mixture_denoiser(data: MixtureData, noise: NoiseCov, obs: Observation | None = None, schedule=None):
    return MixtureDenoiser(data, noise, obs, schedule)



class CirculantDenoiser(Denoiser):
    """Periodic 2-D convolution with fixed taps; independent of ``t`` and ``c``.

    Shift-equivariant under cyclic integer shifts by construction.
    """

    def __init__(self, taps, grid: Grid):
        taps = np.atleast_2d(np.asarray(taps, dtype=np.float64))
        if taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise ValueError("filter taps need odd sizes so the centre is defined")
        self.taps = taps
        self.grid = grid
        self.k = grid.size
        cy, cx = taps.shape[0] // 2, taps.shape[1] // 2
        self._offsets = [(p - cy, q - cx, taps[p, q]) for p in range(taps.shape[0])
                         for q in range(taps.shape[1]) if taps[p, q] != 0]

    def _apply(self, u, sign):
        u = np.asarray(u, dtype=np.float64)
        x = u.reshape(u.shape[:-1] + self.grid.shape)
        out = np.zeros_like(x)
        for dy, dx, w in self._offsets:
            out += w * np.roll(x, (sign * dy, sign * dx), axis=(-2, -1))
        return out.reshape(u.shape)

    def evaluate(self, u, t, c=None):
        return self._apply(u, 1)

    def vjp(self, u, t, c, v):
        return self._apply(v, -1)


class PerturbedDenoiser(Denoiser):
    """``gain * base(u, t, c)`` with a fixed spatially varying gain."""

    def __init__(self, base: Denoiser, gain):
        self.base = base
        self.gain = np.asarray(gain, dtype=np.float64).reshape(-1)
        self.k = base.k
        if self.gain.size != self.k:
            raise ValueError("gain does not match the denoiser dimension")

    def evaluate(self, u, t, c=None):
        return self.gain * self.base.evaluate(u, t, c)

    def vjp(self, u, t, c, v):
        return self.base.vjp(u, t, c, self.gain * np.asarray(v, dtype=np.float64))


def smooth_gain(grid: Grid, amplitude: float = 0.2, cycles: int = 1) -> np.ndarray:
    """``1 + a sin(2 pi n x) sin(2 pi n y)`` at pixel centres, range ``[1 - a, 1 + a]``."""
    x = grid.coords()
    w = 2 * np.pi * cycles
    return (1.0 + amplitude * np.sin(w * x[..., 0]) * np.sin(w * x[..., 1])).reshape(-1)


# -- sampler ----------------------------------------------------------------

def tweedie_weighted_score(denoiser: Denoiser, u_t, t: float, schedule: Schedule | None = None, c=None) -> np.ndarray:
    """``Q grad log p(u_t) = (E[u0 | u_t] - u_t) / sigma(t)^2``."""
    if not t > 0:
        raise ValueError("the weighted score needs t > 0")
    schedule = schedule or Schedule()
    u_t = np.asarray(u_t, dtype=np.float64)
    return (denoiser.evaluate(u_t, t, c) - u_t) / float(schedule.sigma(t)) ** 2


def euler_step(u_t, t: float, dt: float, denoiser: Denoiser, c=None, schedule: Schedule | None = None, h=None) -> np.ndarray:
    """One probability-flow Euler step from ``t`` to ``t - dt`` (``h`` may be precomputed)."""
    schedule = schedule or Schedule()
    u_t = np.asarray(u_t, dtype=np.float64)
    if dt == 0:
        return u_t.copy()
    if h is None:
        h = denoiser.evaluate(u_t, t, c)
    return u_t + dt * schedule.ratio(t) * (h - u_t)


def initial_noise(xi, schedule: Schedule) -> np.ndarray:
    """Scale unit-variance noise to the starting level ``sigma(tau)``."""
    return float(schedule.sigma(schedule.tau)) * np.asarray(xi, dtype=np.float64)


def _check_finite(u, step: int):
    if not np.all(np.isfinite(u)):
        raise NumericalError(f"non-finite state at step {step}", step)


def sample_frame(noise_tau, schedule: Schedule, denoiser: Denoiser, c=None, keep_trajectory: bool = True):
    """Euler rollout from ``u_tau = noise_tau`` down to ``t = dt`` and the final denoise.

    Returns ``(u0, trajectory)`` where ``trajectory[i]`` is the denoiser
    output at ``times()[i]`` (``None`` when not kept).
    """
    u = np.array(noise_tau, dtype=np.float64)
    traj = np.empty((schedule.n_steps,) + u.shape) if keep_trajectory else None
    for i, t in enumerate(schedule.times()):
        h = denoiser.evaluate(u, t, c)
        _check_finite(h, i)
        if keep_trajectory:
            traj[i] = h
        u = euler_step(u, t, schedule.dt, denoiser, c, schedule, h=h)
        _check_finite(u, i)
    return u, traj


def denoising_loss(denoiser: Denoiser, data, noise: NoiseCov, schedule: Schedule, n_mc: int, seed: int) -> float:
    """Monte Carlo ``E_t E_u0 E_ut |h(u_t, t) - u0|^2`` with ``t ~ U(0, tau]``."""
    rng = generator(seed, 0x6c73)
    u0 = data.sample(n_mc, int(rng.integers(2**62)))
    ts = schedule.tau * (1.0 - rng.random(n_mc))
    xi = noise.sample(int(rng.integers(2**62)), n_mc)
    total = 0.0
    for i in range(n_mc):
        ut = u0[i] + schedule.sigma(ts[i]) * xi[i]
        total += float(((denoiser.evaluate(ut, ts[i]) - u0[i]) ** 2).sum())
    return total / n_mc
