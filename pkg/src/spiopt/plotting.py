"""Figures for the study reports, rendered off-screen to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import SIDE  # noqa: E402
from .decoders import CLASSIFY  # noqa: E402


def _ylabel(task: str) -> str:
    return "accuracy" if task == CLASSIFY else "mean PSNR (dB)"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_sweep(reports, path, title: str = "") -> Path:
    """Metric against sampling rate, one line per strategy (or per lambda)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        label = rep.strategy if rep.lam == 1.0 else f"{rep.strategy} (lambda={rep.lam:g})"
        ax.plot(rep.rates, rep.metrics, marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("sampling rate")
    ax.set_ylabel(_ylabel(reports[0].task) if reports else "")
    ax.grid(True, alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_bands(report, path) -> Path:
    """Bar chart of accuracy per rank band, with the random control last."""
    labels = [r.label for r in report.rows]
    acc = [r.accuracy for r in report.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = ["tab:blue" if r.band_start is not None else "tab:gray" for r in report.rows]
    ax.bar(labels, acc, color=colors)
    lo = min(acc)
    ax.set_ylim(max(0.0, lo - 0.05), min(1.0, max(acc) + 0.02))
    ax.set_ylabel("accuracy")
    ax.set_xlabel("rank band (20 patterns)")
    return _save(fig, path)


def plot_patterns(patterns, path, count: int = 16, columns: int = 8, scores=None) -> Path:
    """Montage of the first ``count`` patterns, optionally captioned with their scores."""
    pats = np.asarray(patterns, dtype=np.float64)[:count].reshape(-1, SIDE, SIDE)
    rows = max(1, int(np.ceil(len(pats) / columns)))
    fig, axes = plt.subplots(rows, columns, figsize=(1.2 * columns, 1.3 * rows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < len(pats):
            ax.imshow(pats[i], cmap="gray", vmin=0, vmax=1)
            if scores is not None:
                ax.set_title(f"{scores[i]:.3f}", fontsize=7)
    return _save(fig, path)
