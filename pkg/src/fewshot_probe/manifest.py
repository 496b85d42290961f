"""Dataset manifests and task label derivation.

A manifest lists recordings with their raw annotator labels. A task spec maps
raw labels onto the label set of one evaluation task (merging orca ecotypes
into a single "orca" label, dropping uncertain annotations, and so on).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["recording_id", "audio_uri", "duration_s", "raw_label"]

DROP = None


class ManifestError(ValueError):
    """Malformed manifest or task file."""


class UnmatchedLabelError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledRecording:
    recording_id: str
    audio_uri: str
    duration_s: float
    raw_label: str

    def __post_init__(self):
        if not self.recording_id:
            raise ManifestError("recording_id must be non-empty")
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ManifestError(
                f"duration_s must be > 0 for {self.recording_id!r}, got {self.duration_s}")


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    recordings: tuple[LabeledRecording, ...]

    def __post_init__(self):
        if not self.recordings:
            raise ManifestError(f"manifest {self.dataset_id!r} is empty")
        seen: set[str] = set()
        for rec in self.recordings:
            if rec.recording_id in seen:
                raise ManifestError(f"duplicate recording_id {rec.recording_id!r}")
            seen.add(rec.recording_id)

    def __len__(self) -> int:
        return len(self.recordings)

    def by_id(self) -> dict[str, LabeledRecording]:
        return {r.recording_id: r for r in self.recordings}


@dataclass(frozen=True)
class LabelRule:
    """``match`` is a literal label or a prefix pattern ending in ``*``.

    ``label`` is the task label, or ``None`` to drop matching recordings.
    """

    match: str
    label: str | None

    def __post_init__(self):
        if not self.match:
            raise ManifestError("rule pattern must be non-empty")
        if "*" in self.match[:-1]:
            raise ManifestError(
                f"pattern {self.match!r}: '*' is only allowed as the final character")

    @property
    def is_prefix(self) -> bool:
        return self.match.endswith("*")

    def matches(self, raw_label: str) -> bool:
        if self.is_prefix:
            return raw_label.startswith(self.match[:-1])
        return raw_label == self.match


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    rules: tuple[LabelRule, ...]
    unmatched_policy: str = "drop"

    def __post_init__(self):
        if self.unmatched_policy not in ("drop", "error"):
            raise ManifestError(
                f"unmatched policy must be 'drop' or 'error', got {self.unmatched_policy!r}")
        reachable = {r.label for r in self.rules if r.label is not None}
        if len(reachable) < 2:
            raise ManifestError(
                f"task {self.task_id!r} must reach at least two distinct labels")

    @classmethod
    def identity(cls, task_id: str, labels: Iterable[str],
                 unmatched_policy: str = "error") -> "TaskSpec":
        """Task whose labels are the raw labels themselves."""
        rules = tuple(LabelRule(lab, lab) for lab in sorted(set(labels)))
        return cls(task_id, rules, unmatched_policy)

    def map_label(self, raw_label: str) -> tuple[bool, str | None]:
        """Return ``(matched, task_label)``; a matched DROP rule yields ``(True, None)``."""
        for rule in self.rules:
            if rule.matches(raw_label):
                return True, rule.label
        return False, None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "unmatched": self.unmatched_policy,
            "rules": [{"match": r.match, "label": r.label} for r in self.rules],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskSpec":
        try:
            rules = tuple(LabelRule(str(r["match"]), r["label"]) for r in obj["rules"])
            return cls(str(obj["task_id"]), rules, obj.get("unmatched", "drop"))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"invalid task spec: {exc}") from exc


def load_manifest(path: str | Path, dataset_id: str | None = None) -> DatasetManifest:
    """Parse a manifest CSV.

    Relative ``audio_uri`` values are resolved against the manifest's folder.
    Errors carry the 1-based line number of the offending row.
    """
    path = Path(path)
    recordings: list[LabeledRecording] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}:1: header must be {','.join(MANIFEST_HEADER)!r}, got {header!r}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            rid, uri, dur, raw = (c.strip() for c in row)
            try:
                duration = float(dur)
            except ValueError:
                raise ManifestError(f"{path}:{line}: duration_s {dur!r} is not a number") from None
            if rid in seen:
                raise ManifestError(
                    f"{path}:{line}: duplicate recording_id {rid!r} (first seen on line {seen[rid]})")
            seen[rid] = line
            if uri and not Path(uri).is_absolute():
                uri = str(path.parent / uri)
            try:
                recordings.append(LabeledRecording(rid, uri, duration, raw))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from None
    if not recordings:
        raise ManifestError(f"{path}: manifest has no rows")
    return DatasetManifest(dataset_id or path.stem, tuple(recordings))


def write_manifest(path: str | Path, recordings: Sequence[LabeledRecording]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in recordings:
            writer.writerow([r.recording_id, r.audio_uri, repr(r.duration_s), r.raw_label])


def load_task(path: str | Path) -> TaskSpec:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    return TaskSpec.from_dict(obj)


def derive_task_labels(manifest: DatasetManifest, task: TaskSpec) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    unmatched: Counter[str] = Counter()
    for rec in manifest.recordings:
        matched, label = task.map_label(rec.raw_label)
        if not matched:
            if task.unmatched_policy == "error":
                raise UnmatchedLabelError(
                    f"task {task.task_id!r}: no rule matches raw label {rec.raw_label!r}")
            unmatched[rec.raw_label] += 1
            continue
        if label is not None:
            out.append((rec.recording_id, label))
    if unmatched:
        logger.warning("task %s: dropped %d recordings with unmatched labels: %s",
                       task.task_id, sum(unmatched.values()), dict(sorted(unmatched.items())))
    return out


def class_counts(labels: Sequence[tuple[str, str]]) -> dict[str, int]:
    if not labels:
        raise ValueError("class_counts needs at least one labelled example")
    return dict(Counter(lab for _, lab in labels))
