"""Temporal-consistency and reconstruction metrics, and noise diagnostics."""

from __future__ import annotations

import numpy as np
from scipy import stats

from .flow import FlowMap, FlowSequence, warp_operator
from .grid import Field
from .kernels import KernelSpec, rff_covariance


def _flat(frame) -> np.ndarray:
    if isinstance(frame, Field):
        return frame.flat()
    # flat frames: (k,) or (batch, k)
    a = np.asarray(frame, dtype=np.float64)
    return a.reshape(a.shape[0], -1) if a.ndim >= 2 else a


def masked_warp_mse(frame, reference, flow: FlowMap) -> float:
    """Mean over in-frame pixels of ``(frame o T - reference)^2``.

    ``frame`` and ``reference`` may carry a leading batch axis; the result
    is then one value per batch entry.
    """
    mask = flow.forward_mask.reshape(-1)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no pixel stays in frame under this flow")
    a, b = _flat(frame), _flat(reference)
    W = warp_operator(flow)
    r = ((W @ np.atleast_2d(a).T).T - np.atleast_2d(b)) * mask
    out = (r**2).sum(-1) / n
    return out if a.ndim == 2 else float(out[0])


def warping_error(frames, flows: FlowSequence, reference: str = "first") -> list:
    """Per-frame self-warping error; entry 0 is 0 by definition.

    ``reference='previous'`` compares frame ``j`` pulled back through
    ``T_j`` with frame ``j-1``; ``'first'`` uses the cumulative flow to
    frame 0.
    """
    frames = list(frames)
    if len(frames) != len(flows) + 1:
        raise ValueError("need exactly one more frame than flows")
    if reference in ("previous", "prev"):
        pairs = [(frames[j], frames[j - 1], flows[j - 1]) for j in range(1, len(frames))]
    elif reference == "first":
        pairs = [(frames[j], frames[0], cum) for j, cum in enumerate(flows.cumulative(), start=1)]
    else:
        raise ValueError("reference must be 'first' or 'previous'")
    zero = np.zeros(np.asarray(_flat(frames[0])).shape[:-1]) if np.ndim(_flat(frames[0])) == 2 else 0.0
    return [zero] + [masked_warp_mse(a, b, f) for a, b, f in pairs]


def mse(frame, ground_truth) -> float:
    a, b = _flat(frame), _flat(ground_truth)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("frame sizes differ")
    out = ((a - b) ** 2).mean(-1)
    return out if np.ndim(out) else float(out)


def noise_diagnostics(samples, spec: KernelSpec | None = None, max_lag: int = 4) -> dict:
    """Summary statistics of an ensemble of noise frames ``(n, H, W)``.

    Covariance is measured along the x axis at pixel lags ``0..max_lag``
    (averaged over positions) with its Monte Carlo standard error, and
    compared with the RFF kernel when ``spec`` is given. The KS statistic
    pools every value against ``N(0, 1)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    n, H, W = x.shape
    c = x - x.mean(0)
    lags = np.arange(min(max_lag, W - 1) + 1)
    cov, se = [], []
    for d in lags:
        prod = (c[:, :, : W - d] * c[:, :, d:]).reshape(n, -1).mean(1)
        cov.append(prod.mean())
        se.append(prod.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan)
    report = dict(
        mean=x.mean(0), variance=x.var(0, ddof=1) if n > 1 else np.zeros((H, W)),
        lags=lags, covariance=np.array(cov), covariance_se=np.array(se),
        ks=float(stats.kstest(x.reshape(-1), "norm").statistic),
    )
    report["mean_variance"] = float(report["variance"].mean())
    if spec is not None:
        pts = np.stack([lags / W, np.zeros(len(lags))], axis=-1)
        report["kernel"] = rff_covariance(spec, np.zeros((1, 2)), pts)[0]
    return report


def variance_flagged(report: dict, tol: float = 0.1) -> bool:
    """True when the mean per-pixel variance is off unit by more than ``tol``."""
    return abs(report["mean_variance"] - 1.0) > tol

