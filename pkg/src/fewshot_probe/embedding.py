"""Recording-level embeddings: providers, pooling, persistence and search."""
from __future__ import annotations

import io
import logging
import struct
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .audio import TIME_MAJOR, AudioClip, ModelSpec, WindowPlan, plan_windows

logger = logging.getLogger(__name__)

STORE_MAGIC = b"EMBS"
WINDOW_MAGIC = b"EMBW"
FORMAT_VERSION = 1
NORM_EPS = 1e-12
N_ENVELOPE_SEGMENTS = 16

_HEADER = struct.Struct("<4sIIQ")


class ProviderError(RuntimeError):
    pass


class StoreFormatError(ValueError):
    pass


class ZeroNormWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RecordingEmbedding:
    recording_id: str
    vector: np.ndarray
    normalized: bool


class EmbeddingProvider(Protocol):
    model: ModelSpec
    thread_safe: bool
    needs_audio: bool

    def embed_window(self, samples: np.ndarray | None, recording_id: str | None = None,
                     window_index: int | None = None) -> np.ndarray:
        """Return a ``(frames, embedding_dim)`` matrix for one window."""


def _envelope_features(x: np.ndarray) -> np.ndarray:
    return np.array([np.abs(seg).mean() if seg.size else 0.0
                     for seg in np.array_split(x, N_ENVELOPE_SEGMENTS)])


class SyntheticProvider:
    """Deterministic stand-in for a neural embedding model.

    Each frame is summarized by its mean absolute amplitude in 16 equal
    sub-segments; the 16 features go through a fixed random linear map and a
    fixed bias, both drawn from ``seed``. Recordings whose classes differ in
    energy envelope therefore land in separable regions of embedding space.
    """

    thread_safe = True
    needs_audio = True

    def __init__(self, model: ModelSpec, seed: int = 0):
        self.model = model
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((N_ENVELOPE_SEGMENTS, model.embedding_dim))
        self.bias = 0.1 * rng.standard_normal(model.embedding_dim)

    def embed_window(self, samples, recording_id=None, window_index=None):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape != (self.model.window_length,):
            raise ProviderError(
                f"window {window_index} of {recording_id!r}: expected "
                f"{self.model.window_length} samples, got {samples.shape}")
        frames = self.model.frames if self.model.output_layout == TIME_MAJOR else 1
        feats = np.stack([_envelope_features(f) for f in np.array_split(samples, frames)])
        return feats @ self.projection + self.bias


class PrecomputedProvider:
    """Serves window embeddings computed elsewhere, keyed by (recording_id, window_index)."""

    thread_safe = True
    needs_audio = False

    def __init__(self, model: ModelSpec, table: dict[tuple[str, int], np.ndarray]):
        self.model = model
        self.table = table

    @classmethod
    def from_file(cls, path: str | Path, model: ModelSpec) -> "PrecomputedProvider":
        dim, table = read_window_file(path)
        if dim != model.embedding_dim:
            raise StoreFormatError(
                f"{path}: window file has dim {dim}, model {model.name} expects {model.embedding_dim}")
        return cls(model, table)

    def embed_window(self, samples, recording_id=None, window_index=None):
        try:
            vec = self.table[(recording_id, window_index)]
        except KeyError:
            raise ProviderError(
                f"no precomputed embedding for recording {recording_id!r} "
                f"window {window_index}") from None
        return vec.astype(np.float64)[None, :]


# --- pooling ----------------------------------------------------------------

def pool_time(window_embedding: np.ndarray) -> np.ndarray:
    we = np.asarray(window_embedding, dtype=np.float64)
    if we.ndim == 1:
        return we.copy()
    if we.shape[0] < 1:
        raise ValueError("window embedding has no frames")
    if we.shape[0] == 1:
        return we[0].copy()
    return we.mean(axis=0)


def pool_recording(vectors: Iterable[np.ndarray]) -> np.ndarray:
    mat = np.asarray(list(vectors), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError("pool_recording needs a non-empty list of equal-length vectors")
    if mat.shape[0] == 1:
        return mat[0].copy()
    return mat.mean(axis=0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    A (near-)zero vector is returned unchanged and a :class:`ZeroNormWarning`
    is issued, so one silent recording cannot abort a batch.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= NORM_EPS:
        warnings.warn("zero-norm vector left unnormalized", ZeroNormWarning, stacklevel=2)
        return v.copy()
    return v / norm


def _checked(we: np.ndarray, model: ModelSpec, recording_id, window_index) -> np.ndarray:
    we = np.asarray(we, dtype=np.float64)
    if we.ndim == 1:
        we = we[None, :]
    if we.shape[1] != model.embedding_dim:
        raise ProviderError(
            f"window {window_index} of {recording_id!r}: dim {we.shape[1]} != {model.embedding_dim}")
    # precomputed window files carry vectors already pooled over time
    if model.output_layout == TIME_MAJOR and we.shape[0] not in (1, model.frames):
        raise ProviderError(
            f"window {window_index} of {recording_id!r}: {we.shape[0]} frames, "
            f"expected {model.frames}")
    if not np.all(np.isfinite(we)):
        raise ProviderError(f"window {window_index} of {recording_id!r}: non-finite embedding")
    return we


def embed_planned(provider, model: ModelSpec, plan: WindowPlan, samples: np.ndarray | None,
                  recording_id: str) -> RecordingEmbedding:
    """Embed every window of ``plan``, pool over time and windows, then normalize."""
    windows = plan.extract(samples) if samples is not None else [None] * len(plan)
    pooled = []
    for i, win in enumerate(windows):
        we = _checked(provider.embed_window(win, recording_id=recording_id, window_index=i),
                      model, recording_id, i)
        pooled.append(pool_time(we))
    mean = pool_recording(pooled)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ZeroNormWarning)
        vec = l2_normalize(mean)
    if caught:
        logger.warning("recording %s has a zero embedding; left unnormalized", recording_id)
    return RecordingEmbedding(recording_id, vec, normalized=not caught)


def embed_recording(provider, clip: AudioClip, model: ModelSpec,
                    recording_id: str = "") -> RecordingEmbedding:
    if clip.sample_rate_hz != model.sample_rate_hz:
        raise ValueError(
            f"clip is at {clip.sample_rate_hz} Hz but {model.name} expects {model.sample_rate_hz} Hz")
    plan = plan_windows(clip.samples.size, model.sample_rate_hz, model.window_s)
    return embed_planned(provider, model, plan, clip.samples, recording_id)


# --- store ------------------------------------------------------------------

@dataclass
class EmbeddingStore:
    """Recording id -> float32 embedding vector, in insertion order."""

    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    model: ModelSpec | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("store dimension must be positive")
        items = list(self.entries.items())
        self.entries = {}
        for rid, vec in items:
            self.add(rid, vec)

    def add(self, recording_id: str, vector) -> None:
        if isinstance(vector, RecordingEmbedding):
            vector = vector.vector
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.size != self.dim:
            raise ValueError(f"{recording_id!r}: dimension {vec.size} != store dimension {self.dim}")
        if len(recording_id.encode("utf-8")) > 0xFFFF:
            raise ValueError(f"recording id too long: {recording_id[:40]!r}...")
        with self._lock:
            if recording_id in self.entries:
                raise ValueError(f"duplicate recording id {recording_id!r}")
            self.entries[recording_id] = vec

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, rid) -> bool:
        return rid in self.entries

    def __getitem__(self, rid) -> np.ndarray:
        return self.entries[rid]

    def ids(self) -> list[str]:
        return list(self.entries)

    def matrix(self, ids: Iterable[str] | None = None) -> np.ndarray:
        ids = self.ids() if ids is None else list(ids)
        if not ids:
            return np.zeros((0, self.dim))
        return np.stack([self.entries[i] for i in ids]).astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (self.dim == other.dim and list(self.entries) == list(other.entries)
                and all(self.entries[k].tobytes() == other.entries[k].tobytes()
                        for k in self.entries))


def _write_header(buf, magic: bytes, dim: int, count: int) -> None:
    buf.write(_HEADER.pack(magic, FORMAT_VERSION, dim, count))


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int]:
    if len(data) < _HEADER.size:
        raise StoreFormatError(f"{path}: truncated header")
    got_magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise StoreFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise StoreFormatError(f"{path}: zero dimension")
    return dim, count


def store_write(path: str | Path, store: EmbeddingStore) -> None:
    buf = io.BytesIO()
    _write_header(buf, STORE_MAGIC, store.dim, len(store))
    for rid, vec in store.entries.items():
        if vec.size != store.dim:
            raise ValueError(f"{rid!r}: dimension mismatch")
        raw = rid.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(vec.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_entries(data: bytes, dim: int, count: int, path, with_index: bool):
    pos = _HEADER.size
    vec_bytes = 4 * dim
    for _ in range(count):
        if pos + 2 > len(data):
            raise StoreFormatError(f"{path}: truncated payload")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > len(data):
            raise StoreFormatError(f"{path}: truncated payload")
        rid = data[pos:pos + n].decode("utf-8")
        pos += n
        index = None
        if with_index:
            if pos + 4 > len(data):
                raise StoreFormatError(f"{path}: truncated payload")
            (index,) = struct.unpack_from("<I", data, pos)
            pos += 4
        if pos + vec_bytes > len(data):
            raise StoreFormatError(f"{path}: truncated payload")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += vec_bytes
        yield rid, index, vec
    if pos != len(data):
        raise StoreFormatError(f"{path}: {len(data) - pos} trailing bytes after {count} entries")


def store_read(path: str | Path) -> EmbeddingStore:
    data = Path(path).read_bytes()
    dim, count = _read_header(data, STORE_MAGIC, path)
    store = EmbeddingStore(dim)
    for rid, _, vec in _read_entries(data, dim, count, path, with_index=False):
        store.add(rid, vec)
    return store


def write_window_file(path: str | Path, dim: int,
                      table: dict[tuple[str, int], np.ndarray]) -> None:
    buf = io.BytesIO()
    _write_header(buf, WINDOW_MAGIC, dim, len(table))
    for (rid, index), vec in table.items():
        vec = np.asarray(vec, dtype="<f4").reshape(-1)
        if vec.size != dim:
            raise ValueError(f"({rid!r}, {index}): dimension mismatch")
        raw = rid.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<I", index))
        buf.write(vec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_window_file(path: str | Path) -> tuple[int, dict[tuple[str, int], np.ndarray]]:
    data = Path(path).read_bytes()
    dim, count = _read_header(data, WINDOW_MAGIC, path)
    table = {}
    for rid, index, vec in _read_entries(data, dim, count, path, with_index=True):
        if (rid, index) in table:
            raise StoreFormatError(f"{path}: duplicate entry ({rid!r}, {index})")
        table[(rid, index)] = vec
    return dim, table


# --- search -----------------------------------------------------------------

def nn_search(store: EmbeddingStore, query, top_k: int) -> list[tuple[str, float]]:
    """Exact cosine-similarity search; ties are broken by recording id."""
    if len(store) == 0:
        raise ValueError("cannot search an empty store")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.size != store.dim:
        raise ValueError(f"query dimension {q.size} != store dimension {store.dim}")
    ids = store.ids()
    mat = store.matrix(ids)
    denom = np.linalg.norm(mat, axis=1) * np.linalg.norm(q)
    dots = mat @ q
    sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [(ids[i], float(sims[i])) for i in order[:top_k]]
