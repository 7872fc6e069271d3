"""Squared-exponential Gaussian processes: exact sampling, conditioning and
random Fourier feature (RFF) fields.

An RFF field is a fixed function on the whole plane,

    xi(x) = sqrt(2/J) * sum_j w_j cos(<z_j, x> + b_j),

with ``w ~ N(0, 1)``, ``z ~ N(0, eps^-2 I)`` (optionally truncated per
component at ``beta / eps``) and ``b ~ U(0, 2 pi)``. Across draws of the
features its covariance is the SE kernel (or its truncated counterpart,
see :func:`rff_covariance`).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, special

from . import _rffkern
from .grid import Field, FormatError, Grid
from .streams import generator

RFF_MAGIC = b"WDRF"
RFF_VERSION = 1
_RFF_HEADER = struct.Struct("<4sIIQ")

JITTER_START = 1e-10
JITTER_MAX = 1e-6
DENSE_LIMIT = 16384

DEFAULT_LENGTH_SCALE = 0.004977
DEFAULT_FEATURES = 3000
DEFAULT_TRUNCATION = 2.0


class FactorizationError(np.linalg.LinAlgError):
    pass


def default_length_scale(resolution: int) -> float:
    """Largest length scale whose truncated spectrum stays below Nyquist."""
    return 2.0 / (math.pi * resolution)


@dataclass(frozen=True)
class KernelSpec:
    length_scale: float
    truncation: float | None = DEFAULT_TRUNCATION

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation must be positive (or None for no truncation)")

    @property
    def max_frequency(self) -> float:
        return math.inf if self.truncation is None else self.truncation / self.length_scale


def _sqdist(X, Y) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)


def kernel_matrix(spec: KernelSpec, X, Y) -> np.ndarray:
    return np.exp(-_sqdist(X, Y) / (2.0 * spec.length_scale**2))


def truncated_cos_mean(a, beta: float | None) -> np.ndarray:
    """``E[cos(a g)]`` for ``g ~ N(0, 1)`` conditioned on ``|g| <= beta``.

    Closed form through the Faddeeva function; ``beta=None`` gives the
    untruncated ``exp(-a^2/2)``.
    """
    a = np.abs(np.asarray(a, dtype=np.float64))  # even in a
    gauss = np.exp(-0.5 * a**2)
    if beta is None:
        return gauss
    tail = np.real(np.exp(-0.5 * beta**2 + 1j * a * beta) * special.wofz((a + 1j * beta) / math.sqrt(2.0)))
    return (gauss - tail) / special.erf(beta / math.sqrt(2.0))


def rff_covariance(spec: KernelSpec, X, Y) -> np.ndarray:
    """Covariance of the RFF process over feature draws, truncation included."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    d = (X[:, None, :] - Y[None, :, :]) / spec.length_scale
    return truncated_cos_mean(d[..., 0], spec.truncation) * truncated_cos_mean(d[..., 1], spec.truncation)


def grid_covariance_factors(spec: KernelSpec, grid: Grid, *, rff: bool = False):
    """1-D factors ``(Qy, Qx)`` with ``kron(Qy, Qx)`` the covariance on ``grid``.

    The SE kernel (and its per-component truncation) is separable, so the
    row-major grid covariance is a Kronecker product.
    """
    xs = (np.arange(grid.width) + 0.5) / grid.width
    ys = (np.arange(grid.height) + 0.5) / grid.height
    if rff:
        f = lambda c: truncated_cos_mean((c[:, None] - c[None, :]) / spec.length_scale, spec.truncation)
    else:
        f = lambda c: np.exp(-((c[:, None] - c[None, :]) ** 2) / (2 * spec.length_scale**2))
    return f(ys), f(xs)


def cholesky_jittered(Q: np.ndarray, jitter: float = JITTER_START) -> np.ndarray:
    """Lower Cholesky factor of ``Q + jitter*I``, escalating jitter x10 up to 1e-6."""
    n = Q.shape[0]
    j = jitter
    while True:
        try:
            return linalg.cholesky(Q + j * np.eye(n), lower=True)
        except linalg.LinAlgError:
            if j >= JITTER_MAX:
                raise FactorizationError(f"Cholesky failed with jitter up to {j:g}") from None
            j *= 10.0


def gp_sample_exact(spec: KernelSpec, X, seed: int, jitter: float = JITTER_START, n: int | None = None) -> np.ndarray:
    """Draw ``xi(X)`` from ``N(0, Q(X, X))`` by Cholesky.

    Returns shape ``(len(X),)``, or ``(n, len(X))`` when ``n`` is given.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) > DENSE_LIMIT:
        raise ValueError(f"{len(X)} points exceeds the dense limit of {DENSE_LIMIT}")
    L = cholesky_jittered(kernel_matrix(spec, X, X), jitter)
    z = generator(seed, 0x6770).standard_normal((1 if n is None else n, len(X)))
    out = z @ L.T
    return out[0] if n is None else out


@dataclass(frozen=True)
class GaussianConditional:
    mean: np.ndarray
    cov: np.ndarray


def gp_condition(spec: KernelSpec, X, values_x, Y, jitter: float = JITTER_START) -> GaussianConditional:
    """Law of ``xi(Y)`` given ``xi(X) = values_x`` for the zero-mean SE process."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    Qyy = kernel_matrix(spec, Y, Y)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 2)
    if len(X) == 0:
        return GaussianConditional(np.zeros(len(Y)), Qyy)
    L = cholesky_jittered(kernel_matrix(spec, X, X), jitter)
    Qyx = kernel_matrix(spec, Y, X)
    A = linalg.cho_solve((L, True), Qyx.T).T  # Q(Y,X) Q(X,X)^-1
    mean = A @ np.asarray(values_x, dtype=np.float64)
    cov = Qyy - A @ Qyx.T
    return GaussianConditional(mean, 0.5 * (cov + cov.T))


# -- random Fourier features ------------------------------------------------

@dataclass(frozen=True, eq=False)
class RffField:
    weights: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for name in ("weights", "frequencies", "phases"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        J = len(self.weights)
        if J < 1 or self.frequencies.shape != (J, 2) or self.phases.shape != (J,):
            raise ValueError("inconsistent RFF arrays")

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def scaled(self, alpha: float) -> "RffField":
        return RffField(alpha * self.weights, self.frequencies, self.phases, self.seed)

    def __call__(self, points, threads: int = 1) -> np.ndarray:
        return rff_eval(self, points, threads)


def _truncated_normal(rng: np.random.Generator, scale: float, bound: float, shape) -> np.ndarray:
    out = rng.standard_normal(shape) * scale
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * scale
        bad = np.abs(out) > bound
    return out


def rff_sample(spec: KernelSpec, J: int, seed: int) -> RffField:
    if J < 1:
        raise ValueError("need at least one feature")
    rng = generator(seed, 0x7266)
    w = rng.standard_normal(J)
    z = _truncated_normal(rng, 1.0 / spec.length_scale, spec.max_frequency, (J, 2))
    b = rng.uniform(0.0, 2.0 * math.pi, J)
    return RffField(w, z, b, int(seed))


def rff_eval(field: RffField, points, threads: int = 1) -> np.ndarray:
    """Evaluate the feature sum at ``points`` (``(..., 2)``), anywhere on the plane."""
    pts = np.asarray(points, dtype=np.float64)
    return _rffkern.eval_points(pts, field.weights, field.frequencies, field.phases, threads)


def rff_eval_grid(field: RffField, grid: Grid, threads: int = 1) -> Field:
    """Evaluate on all pixel centres using the separable row/column form."""
    xs = (np.arange(grid.width) + 0.5) / grid.width
    ys = (np.arange(grid.height) + 0.5) / grid.height
    vals = _rffkern.eval_grid(xs, ys, field.weights, field.frequencies, field.phases, threads)
    return Field(grid, vals[..., None])


def rff_eval_grid_many(fields: list[RffField], grid: Grid, batch: int = 8) -> np.ndarray:
    """Evaluate many equal-size fields on a small grid, shape ``(n, H, W)``.

    Batched dense products; meant for Monte Carlo ensembles, not the
    single-field hot path.
    """
    H, W = grid.shape
    out = np.empty((len(fields), H, W))
    for s in range(0, len(fields), batch):
        chunk = fields[s:s + batch]
        w = np.stack([f.weights for f in chunk])
        z = np.stack([f.frequencies for f in chunk])
        b = np.stack([f.phases for f in chunk])
        # pixel centres are arithmetic progressions, so the phase factors are
        # geometric series: two exponentials per feature and axis, then products
        ex = _geometric(np.exp(1j * (z[:, :, 0] * 0.5 / W + b)), np.exp(1j * z[:, :, 0] / W), W)
        ey = _geometric(w * np.exp(1j * z[:, :, 1] * 0.5 / H), np.exp(1j * z[:, :, 1] / H), H)
        # Re(ey ex^T) = cos(y) cos(x) - sin(y) sin(x), as batched real products
        exr, exi = (np.ascontiguousarray(p.transpose(0, 2, 1)) for p in (ex.real, ex.imag))
        vals = np.matmul(np.ascontiguousarray(ey.real), exr) - np.matmul(np.ascontiguousarray(ey.imag), exi)
        out[s:s + batch] = vals * math.sqrt(2.0 / w.shape[1])
    return out


def _geometric(first: np.ndarray, ratio: np.ndarray, n: int) -> np.ndarray:
    """``first * ratio**j`` for ``j < n``, shape ``(batch, n, features)``."""
    out = np.empty((first.shape[0], n, first.shape[1]), dtype=np.complex128)
    out[:, 0] = first
    for j in range(1, n):
        out[:, j] = out[:, j - 1] * ratio
    return out


def rff_write(path, field: RffField) -> None:
    with open(path, "wb") as fh:
        fh.write(_RFF_HEADER.pack(RFF_MAGIC, RFF_VERSION, field.n_features, int(field.seed) & 0xFFFFFFFFFFFFFFFF))
        for arr in (field.weights, field.frequencies, field.phases):
            fh.write(arr.astype("<f8").tobytes())


def rff_read(path) -> RffField:
    data = Path(path).read_bytes()
    if len(data) < _RFF_HEADER.size:
        raise FormatError("truncated RFF header")
    magic, version, J, seed = _RFF_HEADER.unpack_from(data)
    if magic != RFF_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != RFF_VERSION:
        raise FormatError(f"unsupported RFF version {version}")
    if len(data) != _RFF_HEADER.size + 4 * J * 8:
        raise FormatError("RFF body size does not match feature count")
    body = np.frombuffer(data, dtype="<f8", offset=_RFF_HEADER.size)
    return RffField(body[:J].copy(), body[J:3 * J].reshape(J, 2).copy(), body[3 * J:].copy(), seed)
