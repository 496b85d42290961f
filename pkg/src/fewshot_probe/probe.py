"""Multinomial logistic-regression probes trained with L-BFGS.

The training objective is the summed softmax cross-entropy plus an L2 penalty
``(l2 / 2) * ||W||_F^2`` on the weights (biases are not penalized). With
``l2 = 1`` this is the same optimum as a default-strength ``C = 1`` penalized
logistic regression.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    l2_strength: float = 1.0
    max_iters: int = 1000
    grad_tol: float = 1e-5
    history_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be >= 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {k: obj[k] for k in ("l2_strength", "max_iters", "grad_tol", "history_size", "seed")
                 if k in obj}
        return cls(**known)

    def to_dict(self) -> dict:
        return {"l2_strength": self.l2_strength, "max_iters": self.max_iters,
                "grad_tol": self.grad_tol, "history_size": self.history_size, "seed": self.seed}


@dataclass(frozen=True)
class ProbeModel:
    classes: tuple
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        classes = tuple(self.classes)
        if len(classes) < 2:
            raise ValueError("a probe needs at least two classes")
        if len(set(classes)) != len(classes):
            raise ValueError("probe classes must be distinct")
        if w.ndim != 2 or w.shape[0] != len(classes) or b.shape != (len(classes),):
            raise ValueError("weights must be C x dim and biases length C")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("probe parameters must be finite")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "classes": list(self.classes),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "ProbeModel":
        obj = json.loads(text)
        return cls(tuple(obj["classes"]), np.array(obj["weights"], dtype=np.float64),
                   np.array(obj["biases"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _unpack(params: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    if params.size % (dim + 1):
        raise ValueError(f"parameter vector of size {params.size} does not fit dim {dim}")
    n_classes = params.size // (dim + 1)
    w = params[: n_classes * dim].reshape(n_classes, dim)
    b = params[n_classes * dim:]
    return w, b


def objective(params: np.ndarray, X: np.ndarray, y: np.ndarray,
              l2: float) -> tuple[float, np.ndarray]:
    """Penalized softmax cross-entropy and its gradient.

    ``params`` is the row-major flattening of ``W`` (C x dim) followed by
    ``b`` (C). ``y`` holds integer class indices.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n, dim = X.shape
    if n < 1:
        raise ValueError("objective needs at least one sample")
    w, b = _unpack(params, dim)
    if y.min() < 0 or y.max() >= w.shape[0]:
        raise ValueError("label index out of range")

    logp = _log_softmax(X @ w.T + b)
    rows = np.arange(n)
    loss = -logp[rows, y].sum() + 0.5 * l2 * np.sum(w * w)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite probe loss")

    resid = np.exp(logp)
    resid[rows, y] -= 1.0
    grad_w = resid.T @ X + l2 * w
    grad_b = resid.sum(axis=0)
    return float(loss), np.concatenate([grad_w.ravel(), grad_b])


# --- L-BFGS -----------------------------------------------------------------

C1 = 1e-4
C2 = 0.9
MAX_LINE_SEARCH_STEPS = 20


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str = ""
    losses: list[float] = field(default_factory=list)


def _cubic_step(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through (a, fa, ga) and (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if math.isfinite(t) else None


def _strong_wolfe(fun: Objective, x, f0, g0, d, step):
    """Bracketing + zoom line search satisfying the strong Wolfe conditions.

    Returns ``(step, f, g)`` on success and ``None`` after
    ``MAX_LINE_SEARCH_STEPS`` trial points without an acceptable step.
    """
    dphi0 = float(g0 @ d)
    a_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    a = step
    evals = 0
    lo = hi = None

    while evals < MAX_LINE_SEARCH_STEPS:
        f, g = fun(x + a * d)
        evals += 1
        dphi = float(g @ d)
        if f > f0 + C1 * a * dphi0 or (evals > 1 and f >= f_prev):
            lo, hi = (a_prev, f_prev, dphi_prev), (a, f, dphi)
            break
        if abs(dphi) <= -C2 * dphi0:
            return a, f, g
        if dphi >= 0:
            lo, hi = (a, f, dphi), (a_prev, f_prev, dphi_prev)
            break
        a_prev, f_prev, dphi_prev = a, f, dphi
        a = a * 2.0
    else:
        return None

    # zoom: lo always satisfies sufficient decrease and has the lower value
    while evals < MAX_LINE_SEARCH_STEPS:
        a_lo, f_lo, g_lo = lo
        a_hi, f_hi, g_hi = hi
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        width = right - left
        if width <= 1e-16 * max(1.0, right):
            return None
        a = _cubic_step(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
            a = 0.5 * (a_lo + a_hi)
        f, g = fun(x + a * d)
        evals += 1
        dphi = float(g @ d)
        if f > f0 + C1 * a * dphi0 or f >= f_lo:
            hi = (a, f, dphi)
        else:
            if abs(dphi) <= -C2 * dphi0:
                return a, f, g
            if dphi * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (a, f, dphi)
    return None


def lbfgs_minimize(fun: Objective, init, config: TrainConfig = TrainConfig()) -> LbfgsResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    Stops when the infinity norm of the gradient is at most ``config.grad_tol``
    or after ``config.max_iters`` iterations. A failed line search returns the
    last accepted iterate with ``converged=False``.
    """
    x = np.array(init, dtype=np.float64)
    f, g = fun(x)
    losses = [f]
    s_hist: deque[np.ndarray] = deque(maxlen=config.history_size)
    y_hist: deque[np.ndarray] = deque(maxlen=config.history_size)

    for it in range(config.max_iters + 1):
        if np.max(np.abs(g), initial=0.0) <= config.grad_tol:
            return LbfgsResult(x, f, g, it, True, "gradient tolerance reached", losses)
        if it == config.max_iters:
            break

        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / float(yv @ s)
            a_i = rho * float(s @ q)
            q -= a_i * yv
            alphas.append((rho, a_i))
        if s_hist:
            s, yv = s_hist[-1], y_hist[-1]
            q *= float(s @ yv) / float(yv @ yv)
        for (s, yv), (rho, a_i) in zip(zip(s_hist, y_hist), reversed(alphas)):
            b_i = rho * float(yv @ q)
            q += (a_i - b_i) * s
        d = -q

        if float(d @ g) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        step = 1.0 if s_hist else min(1.0, 1.0 / float(np.linalg.norm(g)))

        found = _strong_wolfe(fun, x, f, g, d, step)
        if found is None:
            logger.debug("line search failed at iteration %d (f=%.6g)", it, f)
            return LbfgsResult(x, f, g, it, False, "line search failed", losses)
        a, f_new, g_new = found
        x_new = x + a * d
        s_vec, y_vec = x_new - x, g_new - g
        if float(s_vec @ y_vec) > 1e-12 * float(np.linalg.norm(s_vec) * np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
        x, f, g = x_new, f_new, g_new
        losses.append(f)

    return LbfgsResult(x, f, g, config.max_iters, False, "iteration limit reached", losses)


# --- probe API --------------------------------------------------------------

def _encode(y: Sequence, classes: Sequence) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[v] for v in y], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} is not one of the probe classes") from None


def train_probe(X, y: Sequence, classes: Sequence, config: TrainConfig = TrainConfig()) -> ProbeModel:
    """Fit a probe from zero initialization.

    ``y`` holds labels drawn from ``classes``; the column order of the
    returned model follows ``classes``.
    """
    X = np.asarray(X, dtype=np.float64)
    classes = tuple(classes)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if len(y) != X.shape[0]:
        raise ValueError(f"{X.shape[0]} samples but {len(y)} labels")
    if len(set(classes)) != len(classes) or len(classes) < 2:
        raise ValueError("classes must be at least two distinct labels")
    yi = _encode(y, classes)
    present = set(yi.tolist())
    for i, c in enumerate(classes):
        if i not in present:
            raise ValueError(f"class {c!r} has no training samples")
    if X.shape[0] < len(classes):
        raise ValueError("need at least as many samples as classes")

    dim = X.shape[1]
    l2 = config.l2_strength
    result = lbfgs_minimize(lambda p: objective(p, X, yi, l2),
                            np.zeros(len(classes) * (dim + 1)), config)
    if not result.converged:
        logger.info("probe training stopped after %d iterations: %s (|g|_inf=%.3g)",
                    result.iterations, result.message, np.max(np.abs(result.grad)))
    w, b = _unpack(result.x, dim)
    return ProbeModel(classes, w.copy(), b.copy())


def predict_proba(model: ProbeModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ValueError(f"input dimension {X.shape[1]} != probe dimension {model.dim}")
    return np.exp(_log_softmax(X @ model.weights.T + model.biases))


def predict(model: ProbeModel, X) -> list:
    return [model.classes[i] for i in predict_proba(model, X).argmax(axis=1)]
