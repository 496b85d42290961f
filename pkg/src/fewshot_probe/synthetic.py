"""Synthetic labelled audio for exercising the full pipeline without real models.

Each class is noise shaped by a distinct amplitude envelope that repeats once
per model window, so the synthetic provider separates the classes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .audio import ModelSpec, write_wav
from .manifest import LabeledRecording, write_manifest

ENVELOPES = {
    "rise": lambda t: t,
    "fall": lambda t: 1.0 - t,
    "burst": lambda t: np.exp(-((t - 0.5) ** 2) / 0.01),
}

SYNTHETIC_MODEL = ModelSpec("synthetic", 8000, 1.0, 32)


def envelope_signal(kind: str, n_samples: int, window_length: int, amplitude: float,
                    rng: np.random.Generator) -> np.ndarray:
    t = (np.arange(n_samples) % window_length) / window_length
    env = ENVELOPES[kind](t)
    return np.clip(amplitude * env * rng.uniform(-1.0, 1.0, n_samples), -1.0, 1.0)


def write_envelope_dataset(out_dir: str | Path, n_per_class: int = 60, seed: int = 0,
                           model: ModelSpec = SYNTHETIC_MODEL,
                           classes: tuple[str, ...] = ("rise", "fall", "burst")) -> dict[str, Path]:
    """Write WAVs, a manifest, a task file, a model spec and an experiment config.

    Durations vary between 0.6 and 3.5 windows so both padding and
    multi-window pooling are exercised. Returns the written file paths.
    """
    out = Path(out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    L = model.window_length
    records = []
    for label in classes:
        for i in range(n_per_class):
            rid = f"{label}_{i:03d}"
            n = int(rng.uniform(0.6, 3.5) * L)
            x = envelope_signal(label, n, L, rng.uniform(0.3, 0.8), rng)
            write_wav(audio_dir / f"{rid}.wav", x, model.sample_rate_hz)
            records.append(LabeledRecording(rid, f"audio/{rid}.wav", n / model.sample_rate_hz,
                                            f"synth-{label}"))
    order = rng.permutation(len(records))
    paths = {
        "manifest": out / "manifest.csv",
        "task": out / "task_envelope.json",
        "model_spec": out / "model_spec.json",
        "config": out / "experiment.json",
    }
    write_manifest(paths["manifest"], [records[i] for i in order])
    paths["task"].write_text(json.dumps({
        "task_id": "envelope",
        "unmatched": "error",
        "rules": [{"match": f"synth-{c}", "label": c} for c in classes],
    }, indent=2) + "\n")
    paths["model_spec"].write_text(json.dumps(model.to_dict(), indent=2) + "\n")
    paths["config"].write_text(json.dumps({
        "k_values": [4, 8, 16, 32],
        "trials": 5,
        "master_seed": 0,
        "tasks": ["envelope"],
        "models": [model.name],
    }, indent=2) + "\n")
    return paths
