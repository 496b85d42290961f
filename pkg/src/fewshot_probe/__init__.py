"""Few-shot linear-probe evaluation of bioacoustic embedding models."""

__version__ = "0.1.0"

from .audio import KNOWN_MODELS, AudioClip, ModelSpec, plan_windows, read_wav, resample
from .embedding import (EmbeddingStore, PrecomputedProvider, SyntheticProvider, embed_recording,
                        l2_normalize, nn_search, pool_recording, pool_time, store_read, store_write)
from .experiment import (ExperimentConfig, ExperimentReport, apply_class_floor, emit_report,
                         run_experiment, run_trial, sample_few_shot, score_pretrained)
from .manifest import DatasetManifest, TaskSpec, class_counts, derive_task_labels, load_manifest
from .metrics import AucResult, one_vs_all_auc, roc_auc_binary
from .probe import ProbeModel, TrainConfig, lbfgs_minimize, objective, predict_proba, train_probe
from .viz import PcaModel, TsneConfig, emit_scatter, pca_fit, pca_transform, tsne_affinities, tsne_embed

__all__ = [
    "KNOWN_MODELS", "AudioClip", "ModelSpec", "plan_windows", "read_wav", "resample",
    "EmbeddingStore", "PrecomputedProvider", "SyntheticProvider", "embed_recording",
    "l2_normalize", "nn_search", "pool_recording", "pool_time", "store_read", "store_write",
    "ExperimentConfig", "ExperimentReport", "apply_class_floor", "emit_report",
    "run_experiment", "run_trial", "sample_few_shot", "score_pretrained",
    "DatasetManifest", "TaskSpec", "class_counts", "derive_task_labels", "load_manifest",
    "AucResult", "one_vs_all_auc", "roc_auc_binary",
    "ProbeModel", "TrainConfig", "lbfgs_minimize", "objective", "predict_proba", "train_probe",
    "PcaModel", "TsneConfig", "emit_scatter", "pca_fit", "pca_transform", "tsne_affinities",
    "tsne_embed",
]
