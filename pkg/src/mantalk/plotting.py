"""Figures for reports: EAR traces, loss curves, ablation bars.

All figures go through :func:`save` so the PNG bytes depend only on the data
and the installed matplotlib (no timestamps or software tags in the metadata).
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
fig_size = [fig_width, fig_width * golden_mean]
DPI = 120

colors = ["#08589e", "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e", "#a6761d"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": fig_size,
    "figure.dpi": DPI,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "svg.hashsalt": "mantalk",
    "path.simplify": False,
}


def setup():
    plt.rcParams.update(params)


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ear(ear, path, threshold: float = 0.2, blink_events=(), fps: float = 25.0, title: str | None = None) -> Path:
    """EAR over frames with the blink threshold and detected events shaded."""
    setup()
    ear = np.asarray(ear, dtype=float)
    fig, ax = plt.subplots()
    frames = np.arange(len(ear))
    ax.plot(frames, ear, marker="o", color=colors[0], label="EAR")
    ax.axhline(threshold, color=colors[1], ls="--", lw=0.8, label=f"threshold {threshold:g}")
    for start, end in blink_events:
        ax.axvspan(start - 0.5, end + 0.5, color=colors[1], alpha=0.15, lw=0)
    ax.set_xlabel("frame")
    ax.set_ylabel("eye aspect ratio")
    ax.set_xlim(-0.5, max(len(ear) - 0.5, 0.5))
    ax.set_ylim(0, max(0.45, float(np.nanmax(ear)) * 1.1) if len(ear) else 0.45)
    ax.set_title(title or f"{len(ear)} frames, {len(blink_events)} blinks at {fps:g} fps")
    ax.legend(loc="lower right")
    fig.tight_layout()
    return save(fig, path)


def read_loss_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    series = defaultdict(lambda: ([], []))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps, vals = series[row["component"]]
            steps.append(int(row["step"]))
            vals.append(float(row["value"]))
    return {k: (np.array(s), np.array(v)) for k, (s, v) in series.items()}


def plot_losses(series: dict, path, smooth: int = 1) -> Path:
    setup()
    fig, ax = plt.subplots()
    for name in sorted(series):
        steps, vals = series[name]
        if smooth > 1 and len(vals) >= smooth:
            vals = np.convolve(vals, np.ones(smooth) / smooth, mode="valid")
            steps = steps[smooth - 1:]
        ax.plot(steps, vals, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(ncol=2)
    fig.tight_layout()
    return save(fig, path)


def plot_ablation(labels, values, path, metric: str = "SSIM") -> Path:
    setup()
    fig, ax = plt.subplots(figsize=(fig_width, fig_width * 0.6))
    y = np.arange(len(labels))
    ax.barh(y, values, color=colors[0])
    ax.set_yticks(y, labels)
    ax.invert_yaxis()
    ax.set_xlabel(metric)
    fig.tight_layout()
    return save(fig, path)
