"""Few-shot probing protocol and report emission.

For each (task, model, k) cell: drop classes with fewer than k + 1 labelled
recordings, draw k training recordings per remaining class, train a probe,
score the held-out rest with one-vs-all ROC-AUC, and repeat for several
independently seeded trials.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embedding import EmbeddingStore
from .metrics import AVERAGING, AucResult, one_vs_all_auc
from .probe import TrainConfig, predict_proba, train_probe

logger = logging.getLogger(__name__)

TRIAL_COLUMNS = ["task", "model", "k", "trial", "auc_macro"]
AGGREGATE_COLUMNS = ["task", "model", "k", "n_trials", "auc_mean", "auc_std",
                     "retained_classes", "dropped_classes", "status", "reason"]


class ConfigError(ValueError):
    pass


class InfeasibleTaskError(ValueError):
    """Too few classes survive the k + 1 floor."""


@dataclass(frozen=True)
class ExperimentConfig:
    k_values: tuple[int, ...] = (4, 8, 16, 32)
    trials: int = 5
    master_seed: int = 0
    tasks: tuple[str, ...] = ()
    models: tuple[str, ...] = ()
    train_config: TrainConfig = field(default_factory=TrainConfig)
    auc_averaging: str = "macro"
    pairing: str = "paired"

    def __post_init__(self):
        ks = tuple(sorted(set(int(k) for k in self.k_values)))
        if not ks:
            raise ConfigError("k_values must not be empty")
        if ks[0] < 1:
            raise ConfigError("every k must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.auc_averaging not in AVERAGING:
            raise ConfigError(f"auc_averaging must be one of {AVERAGING}")
        if self.pairing not in ("paired", "independent"):
            raise ConfigError("pairing must be 'paired' or 'independent'")
        object.__setattr__(self, "k_values", ks)
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "models", tuple(self.models))

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ExperimentConfig":
        unknown = set(obj) - {"k_values", "trials", "master_seed", "tasks", "models",
                              "train_config", "auc_averaging", "pairing"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                k_values=tuple(obj.get("k_values", (4, 8, 16, 32))),
                trials=int(obj.get("trials", 5)),
                master_seed=int(obj.get("master_seed", 0)),
                tasks=tuple(obj.get("tasks", ())),
                models=tuple(obj.get("models", ())),
                train_config=TrainConfig.from_dict(obj.get("train_config", {})),
                auc_averaging=obj.get("auc_averaging", "macro"),
                pairing=obj.get("pairing", "paired"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "trials": self.trials,
            "master_seed": self.master_seed,
            "tasks": list(self.tasks),
            "models": list(self.models),
            "train_config": self.train_config.to_dict(),
            "auc_averaging": self.auc_averaging,
            "pairing": self.pairing,
        }


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(obj)


def stable_hash(*parts) -> int:
    """64-bit hash of JSON-serializable parts, stable across processes and platforms."""
    blob = json.dumps(parts, separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def trial_seed(master_seed: int, task: str, model: str, k: int, trial: int,
               pairing: str = "paired") -> int:
    # paired: every model sees the same split for a given (task, k, trial)
    model_part = None if pairing == "paired" else model
    return stable_hash(master_seed, task, model_part, k, trial)


# --- protocol steps -----------------------------------------------------------

def apply_class_floor(counts: Mapping[str, int], k: int) -> tuple[list[str], list[str]]:
    if not counts:
        raise ValueError("no classes to filter")
    retained = sorted(c for c, n in counts.items() if n >= k + 1)
    dropped = sorted(c for c, n in counts.items() if n < k + 1)
    if len(retained) < 2:
        raise InfeasibleTaskError(
            f"k={k}: only {len(retained)} class(es) have at least {k + 1} examples "
            f"(dropped: {', '.join(dropped)})")
    return retained, dropped


def sample_few_shot(examples_by_class: Mapping[str, Sequence[str]], k: int,
                    seed: int) -> tuple[list[str], list[str]]:
    """Draw k ids per class without replacement; the rest form the holdout.

    Ids are sorted within each class and classes are visited in sorted order,
    so the split depends only on the set of examples and the seed.
    """
    rng = np.random.default_rng(seed)
    train, holdout = [], []
    for label in sorted(examples_by_class):
        ids = sorted(examples_by_class[label])
        if len(ids) < k + 1:
            raise InfeasibleTaskError(
                f"class {label!r} has {len(ids)} examples, needs at least {k + 1}")
        chosen = rng.choice(len(ids), size=k, replace=False)
        picked = set(chosen.tolist())
        train.extend(ids[i] for i in chosen)
        holdout.extend(ids[i] for i in range(len(ids)) if i not in picked)
    return train, holdout


@dataclass(frozen=True)
class TrialResult:
    task: str
    model: str
    k: int
    trial_index: int
    seed: int
    auc: AucResult
    auc_value: float
    retained_classes: tuple[str, ...]
    dropped_classes: tuple[str, ...]
    train_ids: tuple[str, ...]
    holdout_ids: tuple[str, ...]


def _present_labels(store: EmbeddingStore, task_labels: Sequence[tuple[str, str]]):
    present = [(rid, lab) for rid, lab in task_labels if rid in store]
    missing = len(task_labels) - len(present)
    if missing:
        logger.warning("%d labelled recordings have no embedding in the store", missing)
    return present


def run_trial(store: EmbeddingStore, task_labels: Sequence[tuple[str, str]], k: int,
              seed: int, train_config: TrainConfig = TrainConfig(), *,
              averaging: str = "macro", task: str = "", model: str = "",
              trial_index: int = 0) -> TrialResult:
    labels = _present_labels(store, task_labels)
    if not labels:
        raise InfeasibleTaskError("no labelled recordings found in the store")
    by_class: dict[str, list[str]] = defaultdict(list)
    for rid, lab in labels:
        by_class[lab].append(rid)
    retained, dropped = apply_class_floor({c: len(v) for c, v in by_class.items()}, k)

    train_ids, holdout_ids = sample_few_shot({c: by_class[c] for c in retained}, k, seed)
    label_of = dict(labels)
    classes = tuple(retained)
    probe = train_probe(store.matrix(train_ids), [label_of[i] for i in train_ids],
                        classes, train_config)
    proba = predict_proba(probe, store.matrix(holdout_ids))
    index = {c: i for i, c in enumerate(classes)}
    auc = one_vs_all_auc(proba, [index[label_of[i]] for i in holdout_ids], classes)
    return TrialResult(task, model, k, trial_index, seed, auc, auc.summary(averaging),
                       classes, tuple(dropped), tuple(train_ids), tuple(holdout_ids))


# --- aggregation ----------------------------------------------------------------

@dataclass
class Cell:
    task: str
    model: str
    k: int
    trial_aucs: list[float] = field(default_factory=list)
    retained_classes: tuple[str, ...] = ()
    dropped_classes: tuple[str, ...] = ()
    status: str = "ok"
    reason: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.trial_aucs)) if self.trial_aucs else math.nan

    @property
    def std(self) -> float:
        if not self.trial_aucs:
            return math.nan
        if len(self.trial_aucs) == 1:
            return 0.0
        return float(np.std(self.trial_aucs, ddof=1))

    def to_dict(self) -> dict:
        return {
            "task": self.task, "model": self.model, "k": self.k,
            "trial_aucs": list(self.trial_aucs),
            "mean": None if not self.trial_aucs else self.mean,
            "std": None if not self.trial_aucs else self.std,
            "retained_classes": list(self.retained_classes),
            "dropped_classes": list(self.dropped_classes),
            "status": self.status, "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Cell":
        return cls(obj["task"], obj["model"], int(obj["k"]), [float(v) for v in obj["trial_aucs"]],
                   tuple(obj["retained_classes"]), tuple(obj["dropped_classes"]),
                   obj["status"], obj["reason"])


@dataclass
class ExperimentReport:
    cells: dict[tuple[str, str, int], Cell]
    config: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        return self.config == other.config and list(self.cells) == list(other.cells) and all(
            self.cells[key].to_dict() == other.cells[key].to_dict() for key in self.cells)

    def ok_cells(self) -> list[Cell]:
        return [c for c in self.cells.values() if c.status == "ok"]

    def to_dict(self) -> dict:
        return {"config": self.config, "cells": [c.to_dict() for c in self.cells.values()]}

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentReport":
        cells = [Cell.from_dict(c) for c in obj["cells"]]
        return cls({(c.task, c.model, c.k): c for c in cells}, obj.get("config", {}))

    def table(self) -> tuple[list[str], list[list]]:
        """Models as rows, (task, k) as columns; infeasible cells are empty."""
        tasks = list(dict.fromkeys(key[0] for key in self.cells))
        models = list(dict.fromkeys(key[1] for key in self.cells))
        ks = sorted({key[2] for key in self.cells})
        columns = [(t, k) for t in tasks for k in ks if any((t, m, k) in self.cells for m in models)]
        header = ["model"] + [f"{t} k={k}" for t, k in columns]
        rows = []
        for m in models:
            row: list = [m]
            for t, k in columns:
                cell = self.cells.get((t, m, k))
                row.append(cell.mean if cell is not None and cell.status == "ok" else None)
            rows.append(row)
        return header, rows


def _run_cell(config: ExperimentConfig, store: EmbeddingStore, labels, task: str,
              model: str, k: int) -> Cell:
    cell = Cell(task, model, k)
    for trial in range(config.trials):
        seed = trial_seed(config.master_seed, task, model, k, trial, config.pairing)
        try:
            result = run_trial(store, labels, k, seed, config.train_config,
                               averaging=config.auc_averaging, task=task, model=model,
                               trial_index=trial)
        except InfeasibleTaskError as exc:
            cell.status, cell.reason = "infeasible", str(exc)
            cell.trial_aucs.clear()
            return cell
        except Exception as exc:  # recorded per cell, the run continues
            logger.exception("cell %s/%s/k=%d trial %d failed", task, model, k, trial)
            cell.status, cell.reason = "error", f"{type(exc).__name__}: {exc}"
            cell.trial_aucs.clear()
            return cell
        cell.trial_aucs.append(result.auc_value)
        cell.retained_classes = result.retained_classes
        cell.dropped_classes = result.dropped_classes
    return cell


def run_experiment(config: ExperimentConfig, stores: Mapping[str, EmbeddingStore],
                   task_labels: Mapping[str, Sequence[tuple[str, str]]],
                   jobs: int = 1) -> ExperimentReport:
    """Run every (task, model, k) cell.

    ``stores`` maps model name to its embedding store and ``task_labels``
    maps task id to ``(recording_id, task_label)`` pairs. Empty ``tasks`` or
    ``models`` in the config select everything supplied.
    """
    tasks = list(config.tasks) or list(task_labels)
    models = list(config.models) or list(stores)
    if not tasks or not models:
        raise ConfigError("experiment needs at least one task and one model")
    for t in tasks:
        if t not in task_labels:
            raise ConfigError(f"task {t!r} has no labels")
    for m in models:
        if m not in stores:
            raise ConfigError(f"model {m!r} has no embedding store")

    keys = [(t, m, k) for t in tasks for m in models for k in config.k_values]

    def job(key):
        t, m, k = key
        return _run_cell(config, stores[m], task_labels[t], t, m, k)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(job, keys))
    else:
        cells = [job(key) for key in keys]
    for cell in cells:
        if cell.status != "ok":
            logger.warning("cell %s/%s/k=%d %s: %s", cell.task, cell.model, cell.k,
                           cell.status, cell.reason)
    return ExperimentReport(dict(zip(keys, cells)), config.to_dict())


def score_pretrained(class_scores, labels: Sequence[str], score_classes: Sequence[str]) -> AucResult:
    """One-vs-all AUC of a model's own classifier outputs, without any probe."""
    scores = np.asarray(class_scores, dtype=np.float64)
    score_classes = list(score_classes)
    if scores.ndim != 2 or scores.shape != (len(labels), len(score_classes)):
        raise ValueError("class_scores must be N x C matching labels and score_classes")
    if not np.all(np.isfinite(scores)):
        raise ValueError("class scores must be finite")
    index = {c: i for i, c in enumerate(score_classes)}
    for lab in labels:
        if lab not in index:
            raise ValueError(f"label class {lab!r} has no score column")
    if len(set(labels)) < 2:
        raise ValueError("labels must cover at least two classes")
    return one_vs_all_auc(scores, [index[lab] for lab in labels], score_classes)


# --- report files ---------------------------------------------------------------

def aggregate_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_aggregate{path.suffix or '.csv'}")


def emit_report(report: ExperimentReport, fmt: str, path: str | Path) -> list[Path]:
    """Write the report; CSV output also produces a ``<stem>_aggregate.csv`` sibling."""
    if not report.cells:
        raise ValueError("report has no cells")
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        for cell in report.cells.values():
            for i, auc in enumerate(cell.trial_aucs):
                w.writerow([cell.task, cell.model, cell.k, i, repr(auc)])
    agg = aggregate_path(path)
    with open(agg, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for cell in report.cells.values():
            ok = bool(cell.trial_aucs)
            w.writerow([cell.task, cell.model, cell.k, len(cell.trial_aucs),
                        repr(cell.mean) if ok else "", repr(cell.std) if ok else "",
                        ";".join(cell.retained_classes), ";".join(cell.dropped_classes),
                        cell.status, cell.reason])
    return [path, agg]


def load_report(path: str | Path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_table(report: ExperimentReport, path: str | Path) -> None:
    header, rows = report.table()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + ["" if v is None else f"{v:.3f}" for v in row[1:]])
