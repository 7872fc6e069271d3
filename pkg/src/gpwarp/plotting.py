"""Matplotlib figures written next to the CSV/tensor outputs (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def noise_panel(fields, titles, path, vmin=-3.0, vmax=3.0):
    """Side-by-side grayscale panels of 2-D arrays."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(fields), figsize=(2.4 * len(fields), 2.6), squeeze=False)
        for ax, f, title in zip(axes[0], fields, titles):
            ax.imshow(np.asarray(f), cmap="gray", vmin=vmin, vmax=vmax, interpolation="nearest")
            ax.set_title(title)
            ax.set_axis_off()
        _save(fig, path)


def frame_strip(frames, shape, path, every: int = 1, vmin=-2.5, vmax=2.5, title=None):
    """A row of video frames (flat arrays reshaped to ``shape``)."""
    picks = list(range(0, len(frames), every))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(picks), figsize=(1.3 * len(picks), 1.6), squeeze=False)
        for ax, j in zip(axes[0], picks):
            ax.imshow(np.asarray(frames[j]).reshape(shape), cmap="viridis", vmin=vmin, vmax=vmax)
            ax.set_title(f"{j}")
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        _save(fig, path)


def error_curves(series: dict, path, ylabel="warping error", logy=True):
    """Per-frame curves, one line per label in ``series``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for label, ys in series.items():
            ax.plot(np.arange(len(ys)), ys, marker="o", ms=2.5, label=label)
        if logy:
            ax.set_yscale("symlog", linthresh=1e-6)
        ax.set_xlabel("frame")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        _save(fig, path)


def guidance_trace(rows, path):
    """``e_t`` against step for every guided frame (first sample only)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        frames = sorted({r["frame"] for r in rows if r["sample"] == 0})
        cmap = plt.get_cmap("viridis", max(len(frames), 1))
        for i, j in enumerate(frames):
            pts = [(r["step"], r["e_t"]) for r in rows if r["frame"] == j and r["sample"] == 0]
            ax.plot(*zip(*pts), color=cmap(i), lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("e_t")
        _save(fig, path)


def covariance_curve(lags, measured, se, kernel, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.errorbar(lags, measured, yerr=2 * np.asarray(se), fmt="o", ms=3, label="empirical")
        if kernel is not None:
            ax.plot(lags, kernel, "-", label="kernel")
        ax.set_xlabel("lag (pixels)")
        ax.set_ylabel("covariance")
        ax.legend(frameon=False)
        _save(fig, path)


def thread_scaling(threads, seconds, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.plot(threads, seconds[0] / np.asarray(seconds), "o-", label="measured")
        ax.plot(threads, threads, "--", color="gray", label="ideal")
        ax.set_xlabel("threads")
        ax.set_ylabel("speedup")
        ax.legend(frameon=False)
        _save(fig, path)
