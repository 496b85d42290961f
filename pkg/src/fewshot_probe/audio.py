"""WAV decoding, resampling and fixed-window planning.

Only uncompressed RIFF/WAVE is handled: integer PCM at 16, 24 or 32 bits and
IEEE float at 32 bits, mono or stereo. Stereo is averaged to mono.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Unsupported or malformed WAV data."""


@dataclass(frozen=True)
class AudioClip:
    sample_rate_hz: int
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be mono (1-D)")
        if samples.size < 1:
            raise ValueError("AudioClip must hold at least one sample")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __len__(self) -> int:
        return self.samples.size


# --- model descriptions -------------------------------------------------------

VECTOR = "vector"
TIME_MAJOR = "time_major"


@dataclass(frozen=True)
class ModelSpec:
    """Input and output geometry of an embedding model.

    ``TIME_MAJOR`` models emit one row per frame; the frame count for a
    window of ``w`` seconds is ``round(w * frames_per_second) + frame_offset``.
    """

    name: str
    sample_rate_hz: int
    window_s: float
    embedding_dim: int
    output_layout: str = VECTOR
    frames_per_second: float = 49.0
    frame_offset: int = -1

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not self.window_s > 0:
            raise ValueError("window_s must be positive")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.output_layout not in (VECTOR, TIME_MAJOR):
            raise ValueError(f"unknown output layout {self.output_layout!r}")
        if self.output_layout == TIME_MAJOR and self.frames_fn(self.window_s) < 1:
            raise ValueError(f"{self.name}: window of {self.window_s}s yields no frames")

    def frames_fn(self, window_s: float) -> int:
        if self.output_layout == VECTOR:
            return 1
        return int(round(window_s * self.frames_per_second)) + self.frame_offset

    @property
    def frames(self) -> int:
        return self.frames_fn(self.window_s)

    @property
    def window_length(self) -> int:
        return int(round(self.window_s * self.sample_rate_hz))

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "sample_rate_hz": self.sample_rate_hz,
            "window_s": self.window_s,
            "embedding_dim": self.embedding_dim,
            "output_layout": self.output_layout,
        }
        if self.output_layout == TIME_MAJOR:
            d["frames_per_second"] = self.frames_per_second
            d["frame_offset"] = self.frame_offset
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelSpec":
        return cls(
            name=str(obj["name"]),
            sample_rate_hz=int(obj["sample_rate_hz"]),
            window_s=float(obj["window_s"]),
            embedding_dim=int(obj["embedding_dim"]),
            output_layout=obj.get("output_layout", VECTOR),
            frames_per_second=float(obj.get("frames_per_second", 49.0)),
            frame_offset=int(obj.get("frame_offset", -1)),
        )


def load_model_spec(path: str | Path) -> ModelSpec:
    return ModelSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# The AVES family accepts variable-length input; 5 s windows are used here.
KNOWN_MODELS: dict[str, ModelSpec] = {
    m.name: m
    for m in [
        ModelSpec("perch_v2", 32000, 5.0, 1536),
        ModelSpec("perch_v1", 32000, 5.0, 1280),
        ModelSpec("surfperch", 32000, 5.0, 1280),
        ModelSpec("gmwm", 24000, 3.0, 1280),
        ModelSpec("birdnet_v2.3", 48000, 3.0, 1024),
        ModelSpec("aves_bio", 16000, 5.0, 768, TIME_MAJOR),
        ModelSpec("birdaves_large", 16000, 5.0, 1024, TIME_MAJOR),
    ]
}


# --- WAV ------------------------------------------------------------------------

def _decode_pcm(raw: bytes, fmt: int, bits: int) -> np.ndarray:
    if fmt == WAVE_FORMAT_IEEE_FLOAT:
        if bits != 32:
            raise WavError(f"unsupported float width: {bits} bits")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if fmt != WAVE_FORMAT_PCM:
        raise WavError(f"unsupported codec (format tag 0x{fmt:04x})")
    if bits == 16:
        ints = np.frombuffer(raw, dtype="<i2").astype(np.int64)
    elif bits == 32:
        ints = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
    else:
        raise WavError(f"unsupported PCM width: {bits} bits")
    return ints.astype(np.float64) / float(1 << (bits - 1))


def read_wav(path: str | Path) -> AudioClip:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")

    fmt_chunk = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(data):
                raise WavError(f"{path}: truncated fmt chunk")
            fmt_chunk = data[body:body + size]
        elif cid == b"data":
            if body + size > len(data):
                raise WavError(
                    f"{path}: truncated file: data chunk declares {size} bytes, "
                    f"{len(data) - body} present")
            payload = data[body:body + size]
            break
        pos = body + size + (size & 1)

    if fmt_chunk is None:
        raise WavError(f"{path}: missing fmt chunk")
    if payload is None:
        raise WavError(f"{path}: missing data chunk")

    fmt, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt_chunk)
    if fmt == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt_chunk) < 26:
            raise WavError(f"{path}: truncated extensible fmt chunk")
        fmt = struct.unpack_from("<H", fmt_chunk, 24)[0]
    if channels not in (1, 2):
        raise WavError(f"{path}: unsupported channel count {channels}")
    if rate <= 0:
        raise WavError(f"{path}: invalid sample rate {rate}")
    if bits % 8 or block_align != channels * bits // 8:
        raise WavError(f"{path}: inconsistent block alignment")
    if len(payload) == 0:
        raise WavError(f"{path}: zero-length data chunk")
    if len(payload) % block_align:
        raise WavError(f"{path}: truncated file: partial sample frame at end of data")

    samples = _decode_pcm(payload, fmt, bits).reshape(-1, channels).mean(axis=1)
    return AudioClip(int(rate), samples)


def write_wav(path: str | Path, clip: AudioClip | np.ndarray, sample_rate_hz: int | None = None,
              bits: int = 16, float_format: bool = False) -> None:
    """Write mono or stereo (N x 2) samples in [-1, 1] as a WAV file."""
    if isinstance(clip, AudioClip):
        samples, rate = clip.samples, clip.sample_rate_hz
    else:
        samples, rate = np.asarray(clip, dtype=np.float64), sample_rate_hz
    if rate is None:
        raise ValueError("sample_rate_hz is required for raw arrays")
    channels = 1 if samples.ndim == 1 else samples.shape[1]
    flat = samples.reshape(-1)
    if float_format:
        fmt, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = flat.astype("<f4").tobytes()
    else:
        fmt = WAVE_FORMAT_PCM
        scale = float(1 << (bits - 1))
        ints = np.clip(np.round(flat * scale), -scale, scale - 1).astype(np.int64)
        if bits == 16:
            payload = ints.astype("<i2").tobytes()
        elif bits == 32:
            payload = ints.astype("<i4").tobytes()
        elif bits == 24:
            u = (ints & 0xFFFFFF).astype("<u4").view(np.uint8).reshape(-1, 4)[:, :3]
            payload = u.tobytes()
        else:
            raise ValueError(f"unsupported PCM width {bits}")
    block = channels * bits // 8
    fmt_body = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    out = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_body)) + fmt_body
    out += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        out += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(out)) + out)


# --- resampling -----------------------------------------------------------------

def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Linear-interpolation resampling.

    Output sample ``j`` sits at source position ``j * source_hz / target_hz``;
    positions past the last input sample hold the last value.
    """
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if target_hz == clip.sample_rate_hz:
        return clip
    n = clip.samples.size
    m = max(1, int(round(n * target_hz / clip.sample_rate_hz)))
    # integer numerator keeps positions exact for integer rate ratios
    pos = np.arange(m, dtype=np.float64) * clip.sample_rate_hz / target_hz
    out = np.interp(pos, np.arange(n, dtype=np.float64), clip.samples)
    return AudioClip(int(target_hz), out)


# --- windowing ------------------------------------------------------------------

@dataclass(frozen=True)
class WindowPlan:
    """Consecutive windows of ``window_length`` samples.

    ``windows`` holds the half-open ``(start, end)`` span of real samples in
    each window; a window with ``pad_tail`` set is zero-filled from ``end``
    up to ``start + window_length``.
    """

    window_length: int
    windows: tuple[tuple[int, int], ...]
    pad_tail: tuple[bool, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.windows)

    def extract(self, samples: np.ndarray) -> np.ndarray:
        """Return an ``(n_windows, window_length)`` array of zero-padded windows."""
        out = np.zeros((len(self.windows), self.window_length), dtype=np.float64)
        for i, (start, end) in enumerate(self.windows):
            out[i, : end - start] = samples[start:end]
        return out


def plan_windows(n_samples: int, sample_rate_hz: int, window_s: float) -> WindowPlan:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    length = int(round(window_s * sample_rate_hz))
    if length < 1:
        raise ValueError(f"window of {window_s}s at {sample_rate_hz} Hz has no samples")
    count = math.ceil(n_samples / length)
    windows = tuple((i * length, min((i + 1) * length, n_samples)) for i in range(count))
    pads = tuple(end - start < length for start, end in windows)
    return WindowPlan(length, windows, pads)

