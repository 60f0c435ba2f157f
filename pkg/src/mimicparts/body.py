"""Motion representation, body-part layout and the synthetic styled-motion generator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics.serialize import FormatError, read_container, write_container
from .speech import SpeechFeatures, _gaussian_smooth

PART_NAMES = ("upper", "hands", "lower")
DEFAULT_CHANNELS = (24, 18, 10)
DEFAULT_FPS = 30.0
DEFAULT_FRAMES = 128
CODEC_DOWNSCALE = 4


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class PartLayout:
    """Partition of the channel axis into named body regions."""

    names: tuple[str, ...]
    indices: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.indices) or not self.names:
            raise LayoutError("need one index set per part name")
        seen: list[int] = []
        for name, idx in zip(self.names, self.indices):
            if not idx:
                raise LayoutError(f"part {name!r} has no channels")
            seen.extend(idx)
        if len(set(seen)) != len(seen):
            raise LayoutError("part channel sets overlap")
        if sorted(seen) != list(range(len(seen))):
            raise LayoutError("part channel sets do not cover 0..C-1")

    @property
    def n_channels(self) -> int:
        return sum(len(i) for i in self.indices)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(i) for i in self.indices)

    def part(self, name: str) -> np.ndarray:
        return np.asarray(self.indices[self.names.index(name)])

    def is_contiguous(self) -> bool:
        flat = [c for idx in self.indices for c in idx]
        return flat == list(range(self.n_channels))

    def to_json(self) -> dict:
        return {"names": list(self.names), "indices": [list(i) for i in self.indices]}

    @classmethod
    def from_json(cls, obj: dict) -> "PartLayout":
        return cls(tuple(obj["names"]), tuple(tuple(int(c) for c in i) for i in obj["indices"]))


def make_part_layout(channels_per_part: Sequence[int] = DEFAULT_CHANNELS,
                     names: Sequence[str] = PART_NAMES) -> PartLayout:
    """Contiguous blocks in the order given (upper, hands, lower by default)."""
    if len(channels_per_part) != len(names):
        raise LayoutError("one channel count per part required")
    if any(int(c) < 1 for c in channels_per_part):
        raise LayoutError(f"channel counts must be >= 1, got {tuple(channels_per_part)}")
    idx, start = [], 0
    for c in channels_per_part:
        idx.append(tuple(range(start, start + int(c))))
        start += int(c)
    return PartLayout(tuple(names), tuple(idx))


def single_part_layout(n_channels: int, name: str = "body") -> PartLayout:
    return PartLayout((name,), (tuple(range(n_channels)),))


@dataclass
class MotionClip:
    values: np.ndarray
    fps: float
    layout: PartLayout
    style_label: int | None = None
    speaker_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise LayoutError(f"clip values must be (frames, channels), got {self.values.shape}")
        if self.values.shape[1] != self.layout.n_channels:
            raise LayoutError(f"clip has {self.values.shape[1]} channels, layout {self.layout.n_channels}")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite motion values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


def split_clip(clip: MotionClip | np.ndarray, layout: PartLayout) -> list[np.ndarray]:
    values = clip.values if isinstance(clip, MotionClip) else np.asarray(clip)
    if values.shape[-1] != layout.n_channels:
        raise LayoutError(f"layout covers {layout.n_channels} channels, clip has {values.shape[-1]}")
    return [values[..., list(idx)] for idx in layout.indices]


def merge_parts(parts: Sequence[np.ndarray], layout: PartLayout) -> np.ndarray:
    """Inverse of :func:`split_clip`; plain concatenation for contiguous layouts."""
    if len(parts) != len(layout.indices):
        raise LayoutError("one array per part required")
    lead = parts[0].shape[:-1]
    out = np.zeros(lead + (layout.n_channels,))
    for p, idx in zip(parts, layout.indices):
        if p.shape[-1] != len(idx):
            raise LayoutError("part width does not match layout")
        out[..., list(idx)] = p
    return out


# synthetic styles ------------------------------------------------------------------

@dataclass
class PartStyle:
    amplitude: float
    frequency: float
    phase: float
    posture: np.ndarray
    jitter: float
    channel_gain: np.ndarray
    channel_phase: np.ndarray


@dataclass
class StyleParams:
    layout: PartLayout
    parts: dict[str, PartStyle]
    label: int | None = None

    def validate(self, fps: float) -> None:
        for name, idx in zip(self.layout.names, self.layout.indices):
            ps = self.parts[name]
            if ps.amplitude < 0:
                raise ValueError(f"{name}: amplitude must be >= 0")
            if not 0 < ps.frequency < fps / 2:
                raise ValueError(f"{name}: frequency must lie in (0, fps/2)")
            for arr in (ps.posture, ps.channel_gain, ps.channel_phase):
                if np.asarray(arr).shape != (len(idx),):
                    raise ValueError(f"{name}: per-channel vectors must have {len(idx)} entries")


# amplitude, frequency (Hz), posture shift, jitter per part, per style
_STYLE_TABLE = {
    "upper": [(1.0, 0.8, 0.0, 0.03), (1.0, 0.8, 0.0, 0.03), (1.5, 1.2, 0.4, 0.05), (1.5, 1.2, 0.4, 0.05)],
    "hands": [(0.6, 1.6, 0.3, 0.02), (0.6, 2.4, -0.3, 0.02), (0.4, 1.6, 0.3, 0.04), (0.4, 2.4, -0.3, 0.04)],
    "lower": [(0.25, 0.4, 0.0, 0.02), (0.45, 0.6, 0.3, 0.02), (0.25, 0.6, 0.3, 0.02), (0.45, 0.4, 0.0, 0.02)],
}

EMOTION_INTENSITY = np.array([0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4])


def default_styles(layout: PartLayout, n_styles: int = 4, seed: int = 7) -> list[StyleParams]:
    """Distinct per-part styles; beyond the tabulated four, parameters are drawn at random."""
    rng = np.random.default_rng(seed)
    styles = []
    for k in range(n_styles):
        parts = {}
        for name, idx in zip(layout.names, layout.indices):
            n = len(idx)
            table = _STYLE_TABLE.get(name)
            if table is not None and k < len(table):
                amp, freq, shift, jit = table[k]
            else:
                amp, freq, shift, jit = rng.uniform(0.3, 1.5), rng.uniform(0.4, 2.5), rng.uniform(-0.4, 0.4), 0.03
            parts[name] = PartStyle(
                amplitude=amp, frequency=freq, phase=float(rng.uniform(0, 2 * np.pi)),
                posture=shift + 0.2 * rng.normal(size=n), jitter=jit,
                channel_gain=rng.uniform(0.5, 1.5, size=n),
                channel_phase=rng.uniform(0, 2 * np.pi, size=n))
        styles.append(StyleParams(layout, parts, label=k))
    return styles


def _content_projection(d_c: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(9173 + 31 * d_c + n)
    return rng.normal(size=(d_c, n)) / np.sqrt(d_c)


def synth_motion(style: StyleParams, speech: SpeechFeatures, n_frames: int, seed: int,
                 fps: float = DEFAULT_FPS, beat_pause: float = 0.9, pause_width: float = 0.05,
                 accent: float = 0.3, impulse: float = 0.5, impulse_width: float = 0.1,
                 content_gain: float = 0.1) -> MotionClip:
    """Deterministic styled clip driven by the speech streams.

    Each part oscillates at its style frequency along a time axis that slows
    almost to a halt at every beat, and a Gaussian stroke peaks on every beat.
    Both put kinematic beats (velocity minima) on the speech beats. Amplitude
    is scaled by emotion intensity and accented around beats; smoothed noise
    adds jitter and the upper body follows a projection of the content stream.
    """
    if n_frames % CODEC_DOWNSCALE:
        raise ValueError(f"n_frames must be divisible by {CODEC_DOWNSCALE}")
    if speech.n_frames < n_frames or abs(speech.fps - fps) > 1e-9:
        raise ValueError("speech features must cover n_frames at the clip fps")
    style.validate(fps)
    rng = np.random.default_rng(seed)
    layout = style.layout
    t = np.arange(n_frames) / fps
    beats = speech.beat_times if speech.beat_times is not None else np.zeros(0)

    bumps = np.zeros(n_frames)
    for b in beats:
        bumps += np.exp(-0.5 * ((t - b) / pause_width) ** 2)
    speed = 1.0 - beat_pause * np.clip(bumps, 0.0, 1.0)
    warped = np.concatenate([[0.0], np.cumsum(speed[:-1])]) / fps
    envelope = 1.0 + accent * np.clip(bumps, 0.0, 1.0)
    strokes = np.zeros(n_frames)
    for b in beats:
        strokes += np.exp(-0.5 * ((t - b) / impulse_width) ** 2)
    intensity = EMOTION_INTENSITY[speech.emotion_id % len(EMOTION_INTENSITY)] if speech.emotion_id is not None else 1.0
    clip_phase = rng.uniform(0, 2 * np.pi)
    clip_gain = rng.uniform(0.9, 1.1)

    values = np.zeros((n_frames, layout.n_channels))
    for name, idx in zip(layout.names, layout.indices):
        ps = style.parts[name]
        theta = 2 * np.pi * ps.frequency * warped[:, None] + ps.phase + clip_phase + ps.channel_phase[None, :]
        gain = ps.amplitude * clip_gain * intensity * ps.channel_gain
        osc = gain[None, :] * envelope[:, None] * np.sin(theta)
        osc = osc + impulse * strokes[:, None] * (gain * np.cos(ps.channel_phase))[None, :]
        noise = _gaussian_smooth(rng.normal(size=(n_frames, len(idx))), 4.0)
        noise /= noise.std() + 1e-12
        part = ps.posture[None, :] + osc + ps.jitter * noise
        if name == layout.names[0] and content_gain:
            slow = _gaussian_smooth(speech.content[:n_frames], 4.0)
            part = part + content_gain * slow @ _content_projection(slow.shape[1], len(idx))
        values[:, list(idx)] = part
    return MotionClip(values, fps, layout, style_label=style.label, speaker_id=style.label,
                      meta={"emotion_id": speech.emotion_id})


# dataset splits -----------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def split_dataset(items: Sequence[tuple[str, int]], ratios=(0.85, 0.075, 0.075), seed: int = 0) -> dict[str, list[str]]:
    """Stratified, deterministic train/val/test assignment of ``(clip_id, label)`` items.

    Per label the ids are sorted, shuffled with a label-specific stream of
    ``seed``, and cut at ``round(n * ratio)`` boundaries.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_label: dict[int, list[str]] = {}
    for clip_id, label in items:
        by_label.setdefault(int(label), []).append(clip_id)
    needed = sum(r > 0 for r in ratios)
    out: dict[str, list[str]] = {k: [] for k in SPLIT_NAMES}
    for label in sorted(by_label):
        ids = sorted(by_label[label])
        if len(ids) < needed:
            raise ValueError(f"label {label} has {len(ids)} clips, fewer than {needed} partitions")
        order = np.random.default_rng([seed, label]).permutation(len(ids))
        ids = [ids[i] for i in order]
        counts = _split_counts(len(ids), ratios)
        start = 0
        for name, c in zip(SPLIT_NAMES, counts):
            out[name] += ids[start:start + c]
            start += c
    return out


def _split_counts(n: int, ratios: tuple[float, ...]) -> list[int]:
    counts = [int(round(n * r)) for r in ratios]
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            counts[i] = 1
    # absorb rounding drift in the largest partition
    big = int(np.argmax(counts))
    counts[big] += n - sum(counts)
    return counts


# files ----------------------------------------------------------------------------------

def save_clip(path: str | Path, clip: MotionClip) -> None:
    header = {
        "kind": "motion_clip",
        "fps": clip.fps,
        "layout": clip.layout.to_json(),
        "style_label": clip.style_label,
        "speaker_id": clip.speaker_id,
        "meta": clip.meta,
    }
    write_container(path, header, [clip.values])


def load_clip(path: str | Path) -> MotionClip:
    header, tensors = read_container(path)
    if header.get("kind") != "motion_clip" or len(tensors) != 1:
        raise FormatError(f"{path}: not a motion clip file")
    return MotionClip(tensors[0], header["fps"], PartLayout.from_json(header["layout"]),
                      header.get("style_label"), header.get("speaker_id"), header.get("meta") or {})


def clip_features(values: np.ndarray, fps: float, layout: PartLayout) -> np.ndarray:
    """Per-part (mean, std, dominant frequency) summary used by the separability checks."""
    feats = []
    for part in split_clip(values, layout):
        centred = part - part.mean(axis=0)
        spec = np.abs(np.fft.rfft(centred, axis=0)).sum(axis=1)
        freqs = np.fft.rfftfreq(part.shape[0], d=1.0 / fps)
        feats += [part.mean(), part.std(axis=0).mean(), freqs[1 + np.argmax(spec[1:])]]
    return np.asarray(feats)


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
