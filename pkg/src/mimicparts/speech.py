"""Conditioning streams: content, rhythm and emotion features.

The synthetic generator stands in for pretrained speech encoders and carries
ground-truth beats and emotion labels; real extractor outputs can be imported
through the feature file format.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics.serialize import FormatError, read_container, write_container

N_EMOTIONS = 8
DEFAULT_DIMS = (32, 8, 8)
# fixed seed: the emotion table is a constant of the generator, not of a clip
_EMOTION_TABLE_SEED = 20240817
RHYTHM_WIDTHS = (0.5, 0.75, 1.0, 1.25)


class FeatureError(ValueError):
    pass


@dataclass
class SpeechFeatures:
    content: np.ndarray
    rhythm: np.ndarray
    emotion: np.ndarray
    fps: float
    beat_times: np.ndarray | None = None
    emotion_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.content = np.asarray(self.content, dtype=np.float64)
        self.rhythm = np.asarray(self.rhythm, dtype=np.float64)
        self.emotion = np.asarray(self.emotion, dtype=np.float64)
        lengths = {a.shape[0] for a in (self.content, self.rhythm, self.emotion)}
        if any(a.ndim != 2 for a in (self.content, self.rhythm, self.emotion)):
            raise FeatureError("feature streams must be 2-D (frames x dims)")
        if len(lengths) != 1:
            raise FeatureError(f"streams disagree on frame count: {sorted(lengths)}")
        if self.n_frames < 1:
            raise FeatureError("empty feature streams")
        if not all(np.isfinite(a).all() for a in (self.content, self.rhythm, self.emotion)):
            raise FeatureError("non-finite feature values")
        if self.fps <= 0:
            raise FeatureError("fps must be positive")
        if self.beat_times is not None:
            b = np.asarray(self.beat_times, dtype=np.float64)
            if b.size and (np.any(np.diff(b) <= 0) or b[0] < 0 or b[-1] > self.n_frames / self.fps):
                raise FeatureError("beat times must be strictly increasing inside the clip")
            self.beat_times = b

    @property
    def n_frames(self) -> int:
        return self.content.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.content.shape[1], self.rhythm.shape[1], self.emotion.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps


def emotion_table(n_emotions: int = N_EMOTIONS, dim: int = DEFAULT_DIMS[2]) -> np.ndarray:
    """Fixed, well separated emotion codes (rows have unit norm)."""
    rng = np.random.default_rng(_EMOTION_TABLE_SEED + 7919 * dim + n_emotions)
    table = rng.normal(size=(n_emotions, dim))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def _gaussian_smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    """Smooth along axis 0 with a truncated, renormalised Gaussian kernel."""
    if sigma <= 0:
        return x
    radius = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(x, ((radius, radius),) + ((0, 0),) * (x.ndim - 1), mode="edge")
    out = np.zeros_like(x, dtype=np.float64)
    for i, w in enumerate(k):
        out += w * padded[i:i + x.shape[0]]
    return out


def beat_grid(tempo_bpm: float, duration: float, phase: float = 0.0) -> np.ndarray:
    period = 60.0 / tempo_bpm
    return np.arange(phase % period, duration, period)


def rhythm_stream(beats: np.ndarray, n_frames: int, fps: float, dim: int) -> np.ndarray:
    """Beat impulses smoothed at several widths (in frames), one width per channel."""
    t = np.arange(n_frames) / fps
    out = np.zeros((n_frames, dim))
    for j in range(dim):
        width = RHYTHM_WIDTHS[j % len(RHYTHM_WIDTHS)] * (1 + 0.5 * (j // len(RHYTHM_WIDTHS))) / fps
        for b in beats:
            out[:, j] += np.exp(-0.5 * ((t - b) / width) ** 2)
    return out


def synth_speech(tempo_bpm: float, emotion_id: int, n_frames: int, fps: float = 30.0, seed: int = 0,
                 dims: tuple[int, int, int] = DEFAULT_DIMS, n_emotions: int = N_EMOTIONS,
                 phase: float = 0.0, noise: float = 0.02) -> SpeechFeatures:
    """Synthetic speech streams with known beats and emotion label.

    Beats sit at ``phase + k * 60 / tempo_bpm`` seconds.
    """
    if not 40 <= tempo_bpm <= 240:
        raise FeatureError(f"tempo {tempo_bpm} bpm outside [40, 240]")
    if not 0 <= emotion_id < n_emotions:
        raise FeatureError(f"unknown emotion id {emotion_id}")
    if n_frames < 1:
        raise FeatureError("n_frames must be positive")
    d_c, d_r, d_e = dims
    rng = np.random.default_rng(seed)
    beats = beat_grid(tempo_bpm, n_frames / fps, phase)

    rhythm = rhythm_stream(beats, n_frames, fps, d_r)
    rhythm += noise * np.abs(rng.normal(size=rhythm.shape))

    emotion = np.tile(emotion_table(n_emotions, d_e)[emotion_id], (n_frames, 1))
    emotion += noise * rng.normal(size=emotion.shape)

    # piecewise-constant "tokens" of 3-8 frames, then smoothed
    tokens = np.zeros((n_frames, d_c))
    start = 0
    while start < n_frames:
        length = int(rng.integers(3, 9))
        tokens[start:start + length] = rng.normal(size=d_c)
        start += length
    content = _gaussian_smooth(tokens, 2.0)
    content /= content.std() + 1e-12

    return SpeechFeatures(content, rhythm, emotion, float(fps), beats, int(emotion_id),
                          meta={"tempo_bpm": float(tempo_bpm), "phase": float(phase)})


def resample_stream(x: np.ndarray, n_out: int) -> np.ndarray:
    """Linear interpolation along axis 0 with endpoints kept aligned."""
    n_in = x.shape[0]
    if n_out == n_in:
        return x.copy()
    if n_in == 1:
        return np.repeat(x, n_out, axis=0)
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int).clip(0, n_in - 2)
    frac = (pos - lo)[:, None]
    return (1 - frac) * x[lo] + frac * x[lo + 1]


def align_features(features: SpeechFeatures, motion_fps: float, n_frames: int) -> SpeechFeatures:
    """Resample every stream to ``n_frames`` samples at ``motion_fps``; beats are kept as-is."""
    if n_frames <= 0:
        raise FeatureError("n_frames must be positive")
    beats = features.beat_times
    if beats is not None:
        beats = beats[beats <= n_frames / motion_fps]
    return SpeechFeatures(resample_stream(features.content, n_frames),
                          resample_stream(features.rhythm, n_frames),
                          resample_stream(features.emotion, n_frames),
                          float(motion_fps), beats, features.emotion_id, dict(features.meta))


def save_features(path: str | Path, features: SpeechFeatures) -> None:
    header = {
        "kind": "speech_features",
        "fps": features.fps,
        "dims": list(features.dims),
        "n_frames": features.n_frames,
        "beat_times": None if features.beat_times is None else features.beat_times.tolist(),
        "emotion_id": features.emotion_id,
        "meta": features.meta,
    }
    write_container(path, header, [features.content, features.rhythm, features.emotion])


def load_features(path: str | Path) -> SpeechFeatures:
    header, tensors = read_container(path)
    if header.get("kind") != "speech_features" or len(tensors) != 3:
        raise FormatError(f"{path}: not a speech feature file")
    content, rhythm, emotion = tensors
    if [content.shape[1], rhythm.shape[1], emotion.shape[1]] != list(header["dims"]):
        raise FeatureError(f"{path}: stream widths disagree with header dims")
    beats = header.get("beat_times")
    return SpeechFeatures(content, rhythm, emotion, header["fps"],
                          None if beats is None else np.asarray(beats, dtype=np.float64),
                          header.get("emotion_id"), header.get("meta") or {})
