"""ROC-AUC via the Mann-Whitney rank statistic."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

AVERAGING = ("macro", "weighted")


class UndefinedAucError(ValueError):
    """AUC requested for scores with only one label value."""


class DegenerateClassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AucResult:
    per_class: dict
    macro: float
    support: dict

    @property
    def weighted(self) -> float:
        total = sum(self.support[c] for c in self.per_class)
        return float(sum(self.per_class[c] * self.support[c] for c in self.per_class) / total)

    def summary(self, averaging: str = "macro") -> float:
        if averaging == "macro":
            return self.macro
        if averaging == "weighted":
            return self.weighted
        raise ValueError(f"unknown averaging {averaging!r}")


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their rank range."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    n = values.size
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def roc_auc_binary(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Probability that a random positive outscores a random negative, ties counting half.

    Computed from average ranks in O(N log N); the numerator is an exact
    half-integer, so the value equals direct pair counting bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC undefined with {n_pos} positive and {n_neg} negative samples")
    u = average_ranks(scores)[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def one_vs_all_auc(proba, labels: Sequence[int], classes: Sequence | None = None) -> AucResult:
    """Per-class AUC of each probability column against the rest, plus macro mean.

    Classes without any positive (or without any negative) holdout sample are
    left out of the average with a :class:`DegenerateClassWarning`.
    """
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if proba.ndim != 2 or proba.shape[0] != labels.size:
        raise ValueError("proba must be N x C with one label per row")
    n_classes = proba.shape[1]
    names = list(classes) if classes is not None else list(range(n_classes))
    if len(names) != n_classes:
        raise ValueError("one class name per column required")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label index out of range")

    per_class, support, skipped = {}, {}, []
    for c, name in enumerate(names):
        positives = labels == c
        try:
            per_class[name] = roc_auc_binary(proba[:, c], positives)
        except UndefinedAucError:
            skipped.append(name)
            continue
        support[name] = int(positives.sum())
    if not per_class:
        raise UndefinedAucError("no class has both positive and negative samples")
    if skipped:
        warnings.warn(f"classes without positives or negatives excluded from AUC: {skipped}",
                      DegenerateClassWarning, stacklevel=2)
    macro = float(np.mean(list(per_class.values())))
    return AucResult(per_class, macro, support)
