"""PCA compression and exact t-SNE for embedding scatter plots."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

logger = logging.getLogger(__name__)

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
BANDWIDTH_FLOOR = 1e-12


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(X, out_dim: int) -> PcaModel:
    X = np.asarray(X, dtype=np.float64)
    n, dim = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= out_dim <= min(n - 1, dim):
        raise ValueError(f"out_dim must be in [1, {min(n - 1, dim)}], got {out_dim}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:out_dim].copy()
    # sign convention: the largest-magnitude entry of each component is positive
    pivots = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(out_dim), pivots])[:, None]
    return PcaModel(mean, comps, s[:out_dim] ** 2 / (n - 1))


def pca_transform(model: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.mean.size:
        raise ValueError(f"input dimension {X.shape[-1]} != PCA dimension {model.mean.size}")
    return (X - model.mean) @ model.components.T


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # shift by the nearest distance so exp() cannot underflow to all zeros
    p = np.exp(-(d - d.min()) * beta)
    p /= p.sum()
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz]))), p


def conditional_affinities(X, perplexity: float, tol: float = 1e-5,
                           max_steps: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-normalized Gaussian affinities with per-point bandwidths.

    Returns ``(P_cond, betas, converged)`` where ``betas`` are the precisions
    ``1 / (2 sigma^2)`` and ``converged`` flags rows whose entropy reached
    ``log(perplexity)`` within ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise ValueError("t-SNE needs at least 4 points")
    if not 0 < perplexity < (n - 1) / 3:
        raise ValueError(f"perplexity must be in (0, {(n - 1) / 3:.3g}) for {n} points")
    D = _sq_distances(X)
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.empty(n)
    ok = np.zeros(n, dtype=bool)
    max_beta = 1.0 / (2.0 * BANDWIDTH_FLOOR ** 2)
    for i in range(n):
        d = np.delete(D[i], i)
        spread = np.mean(d - d.min())
        beta = 1.0 / spread if spread > 0 else 1.0
        lo, hi = 0.0, math.inf
        h, p = _row_entropy(d, beta)
        for _ in range(max_steps):
            if abs(h - target) <= tol:
                ok[i] = True
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if math.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            beta = min(beta, max_beta)
            h, p = _row_entropy(d, beta)
        else:
            ok[i] = abs(h - target) <= tol
        if not ok[i]:
            logger.warning("t-SNE row %d: entropy %.6f misses target %.6f", i, h, target)
        betas[i] = beta
        P[i, np.arange(n) != i] = p
    return P, betas, ok


def tsne_affinities(X, perplexity: float = 30.0) -> np.ndarray:
    """Symmetrized joint affinities ``(P_ij + P_ji) / 2N``."""
    P, _, _ = conditional_affinities(X, perplexity)
    joint = (P + P.T) / (2.0 * P.shape[0])
    np.fill_diagonal(joint, 0.0)
    return joint


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum: float = 0.5
    final_momentum: float = 0.8
    seed: int = 0


def _student_t(Y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = _student_t(Y)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_embed(P: np.ndarray, config: TsneConfig = TsneConfig(), dims: int = 2) -> np.ndarray:
    """Gradient descent on KL(P || Q) with a Student-t kernel.

    Early exaggeration multiplies P for the first ``exaggeration_iters``
    steps, when momentum also switches to ``final_momentum``. Per-coordinate
    gains adapt the step size.
    """
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    rng = np.random.default_rng(config.seed)
    Y = 1e-4 * rng.standard_normal((n, dims))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(config.iterations):
        early = it < config.exaggeration_iters
        Pe = P * config.early_exaggeration if early else P
        momentum = config.momentum if early else config.final_momentum
        num = _student_t(Y)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (Pe - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - config.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
    return Y


def embed_2d(X, out_dim: int = 32, config: TsneConfig = TsneConfig()) -> np.ndarray:
    """PCA to ``out_dim`` (clamped to what the data supports), then t-SNE."""
    X = np.asarray(X, dtype=np.float64)
    feasible = min(X.shape[0] - 1, X.shape[1])
    if out_dim > feasible:
        logger.warning("PCA dimension clamped from %d to %d", out_dim, feasible)
        out_dim = feasible
    Z = pca_transform(pca_fit(X, out_dim), X)
    return tsne_embed(tsne_affinities(Z, config.perplexity), config)


def label_colors(labels: Sequence[str]) -> dict[str, str]:
    return {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(sorted(set(labels)))}


def emit_scatter(coords, labels: Sequence[str], path: str | Path, title: str = "",
                 width: int = 640, height: int = 480) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    labels = [str(lab) for lab in labels]
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] != len(labels):
        raise ValueError("need N x 2 coordinates and one label per point")
    colors = label_colors(labels)
    legend_w = 20 + 8 * max(len(lab) for lab in colors) + 30
    plot_w = width - legend_w
    mx, my = 0.05 * plot_w, 0.05 * height

    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    sx = mx + (coords[:, 0] - lo[0]) / span[0] * (plot_w - 2 * mx)
    sy = height - my - (coords[:, 1] - lo[1]) / span[1] * (height - 2 * my)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" style="fill:#ffffff"/>',
    ]
    if title:
        out.append(f'<title>{escape(title)}</title>')
    out.append('<g class="points">')
    for x, y, lab in zip(sx, sy, labels):
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3" '
                   f'style="fill:{colors[lab]};fill-opacity:0.8;stroke:none"/>')
    out.append('</g>')
    out.append('<g class="legend">')
    for i, (lab, color) in enumerate(colors.items()):
        y = 20 + 18 * i
        out.append(f'<g class="legend-entry"><rect x="{plot_w + 10}" y="{y - 9}" width="10" '
                   f'height="10" style="fill:{color}"/><text x="{plot_w + 26}" y="{y}" '
                   f'style="font-family:sans-serif;font-size:12px">{escape(lab)}</text></g>')
    out.append('</g>')
    out.append('</svg>')
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def write_coords(path: str | Path, ids: Sequence[str], coords, labels: Sequence[str]) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording_id", "x", "y", "label"])
        for rid, (x, y), lab in zip(ids, coords, labels):
            w.writerow([rid, repr(float(x)), repr(float(y)), lab])
