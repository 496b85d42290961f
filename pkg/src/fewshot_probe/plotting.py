"""Matplotlib figures written next to the CSV/JSON reports.

Figures are built on bare ``Figure`` objects (no pyplot state), so they can be
rendered from worker threads and never open a window.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure

from .experiment import ExperimentReport
from .viz import label_colors

# no timestamps or version strings, so reruns give identical files
_META = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None},
         "pdf": {"CreationDate": None, "Producer": None, "Creator": None}}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "png"
    fig.savefig(path, dpi=150, metadata=_META.get(fmt))
    return path


def plot_auc_by_k(report: ExperimentReport, path: str | Path) -> Path:
    """One panel per task: mean ROC-AUC against k, one line per model, std as error bars."""
    tasks = list(dict.fromkeys(key[0] for key in report.cells))
    models = list(dict.fromkeys(key[1] for key in report.cells))
    ncols = min(3, len(tasks))
    nrows = int(np.ceil(len(tasks) / ncols))
    fig = Figure(figsize=(3.6 * ncols, 3.0 * nrows), layout="constrained")
    axes = fig.subplots(nrows, ncols, squeeze=False).ravel()
    for ax, task in zip(axes, tasks):
        for model in models:
            cells = sorted((c for (t, m, _), c in report.cells.items()
                            if t == task and m == model and c.status == "ok"),
                           key=lambda c: c.k)
            if not cells:
                continue
            ks = [c.k for c in cells]
            ax.errorbar(ks, [c.mean for c in cells], yerr=[c.std for c in cells],
                        marker="o", ms=3, capsize=2, lw=1, label=model)
            for c in cells:
                if c.dropped_classes:
                    ax.annotate("*", (c.k, c.mean), textcoords="offset points", xytext=(3, 3))
        ax.set_xscale("log", base=2)
        ax.set_xlabel("k (training examples per class)")
        ax.set_ylabel("ROC-AUC")
        ax.set_title(task)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right", frameon=False)
    for ax in axes[len(tasks):]:
        ax.set_visible(False)
    return _save(fig, path)


def plot_embedding_2d(coords, labels: Sequence[str], path: str | Path, title: str = "") -> Path:
    coords = np.asarray(coords, dtype=np.float64)
    labels = [str(lab) for lab in labels]
    colors = label_colors(labels)
    fig = Figure(figsize=(5.0, 4.2), layout="constrained")
    ax = fig.subplots()
    for lab, color in colors.items():
        mask = np.array([x == lab for x in labels])
        ax.scatter(coords[mask, 0], coords[mask, 1], s=8, c=color, alpha=0.8, label=lab,
                   linewidths=0)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    ax.legend(loc="best", frameon=False, markerscale=2)
    return _save(fig, path)
