"""Figures for experiment results: mean curves with interquartile bands.

Uses the non-interactive Agg backend; figures go straight to files.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.linewidth": 0.5,
}

COLORS = {"standard": "black", "targeted-batch": "tab:red", "targeted-resample": "tab:blue"}

YLABELS = {
    "training_loss": "training loss",
    "squared-error": "target squared error",
    "accuracy": "target accuracy",
}


def _figsize(scale=1.0, ratio=(np.sqrt(5.0) - 1.0) / 2.0):
    width = 6.0 * scale
    return width, width * ratio


def draw_curve(ax, curve, label, color=None, band=True):
    epochs = np.arange(1, len(curve.mean) + 1)
    ax.plot(epochs, curve.mean, label=label, color=color, lw=1.5)
    if band:
        ax.fill_between(epochs, curve.lower, curve.upper, color=color, alpha=0.2, lw=0)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def plot_experiment(result, path, title=None):
    """Training loss (top) and target metric (bottom) for every method."""
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=_figsize(1.0, 1.1), sharex=True)
        for method in result.methods:
            color = COLORS.get(method)
            draw_curve(top, result.curve(method, "training_loss"), method, color, band=False)
            draw_curve(bottom, result.curve(method, "target_metric"), method, color)
        top.set_ylabel(YLABELS["training_loss"])
        bottom.set_ylabel(YLABELS.get(result.metric, result.metric))
        bottom.set_xlabel("epoch")
        top.legend(loc="best")
        top.set_title(title or f"g = {result.g}, {result.config.splits} splits")
        _save(fig, path)
    return Path(path)


def plot_study(results: dict, path, label_fmt="{}", title=None):
    """Overlay several experiments (e.g. one per t or per group size)."""
    cmap = plt.get_cmap("tab10")
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=_figsize(1.0, 1.1), sharex=True)
        metric = None
        for i, (key, result) in enumerate(results.items()):
            metric = result.metric
            for j, method in enumerate(result.methods):
                color = cmap((i * len(result.methods) + j) % 10)
                label = f"{method}, {label_fmt.format(key)}"
                draw_curve(top, result.curve(method, "training_loss"), label, color, band=False)
                draw_curve(bottom, result.curve(method, "target_metric"), label, color)
        top.set_ylabel(YLABELS["training_loss"])
        bottom.set_ylabel(YLABELS.get(metric, metric or ""))
        bottom.set_xlabel("epoch")
        top.legend(loc="best")
        if title:
            top.set_title(title)
        _save(fig, path)
    return Path(path)
