"""Report figures: PR and F-measure curves, training-loss curves, sweep bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def figsize(scale: float = 1.0, ratio: float = 0.75):
    width = 4.5 * scale
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_curves(curves: dict, out_dir, prefix: str = "") -> list[Path]:
    """``curves``: label -> :class:`osad.metrics.Curves`. Writes PR and F plots."""
    out_dir = Path(out_dir)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for label, c in curves.items():
            ax.plot(c.recall, c.precision, label=label, lw=1.2)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower left", frameon=False)
        pr = _save(fig, out_dir / f"{prefix}pr_curve.png")

        fig, ax = plt.subplots(figsize=figsize())
        for label, c in curves.items():
            ax.plot(c.thresholds, c.fmeasure, label=label, lw=1.2)
        ax.set_xlabel("Threshold")
        ax.set_ylabel("F-measure")
        ax.set_xlim(0, 255)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower left", frameon=False)
        fm = _save(fig, out_dir / f"{prefix}f_curve.png")
    return [pr, fm]


def plot_losses(logs: dict, path, smooth: int = 5) -> Path:
    """``logs``: label -> sequence of per-step losses."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.2, 0.6))
        for label, losses in logs.items():
            y = np.asarray(losses, dtype=float)
            if smooth > 1 and len(y) >= smooth:
                y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            ax.plot(np.arange(len(y)), y, label=str(label), lw=1.0)
        ax.set_xlabel("Iterations")
        ax.set_ylabel("Loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(rows: list[dict], axis: str, path, metrics=("iou", "fbeta", "ephi", "cc", "mae")) -> Path:
    labels = [str(r[axis]) for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.2, 0.6))
        for i, m in enumerate(metrics):
            ax.bar(x + i * width, [r[m] for r in rows], width, label=m)
        ax.set_xticks(x + width * (len(metrics) - 1) / 2, labels)
        ax.set_xlabel(axis)
        ax.set_ylim(0, 1)
        ax.legend(ncol=len(metrics), frameon=False, loc="upper left")
        return _save(fig, path)
