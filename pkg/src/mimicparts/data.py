"""Synthetic paired speech/motion corpus."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import (
    DEFAULT_CHANNELS,
    DEFAULT_FPS,
    DEFAULT_FRAMES,
    MotionClip,
    PartLayout,
    default_styles,
    load_clip,
    make_part_layout,
    save_clip,
    split_dataset,
    synth_motion,
)
from .speech import N_EMOTIONS, DEFAULT_DIMS, SpeechFeatures, load_features, save_features, synth_speech

TEMPO_RANGE = (60.0, 150.0)


@dataclass
class Dataset:
    """Clips and aligned speech features in memory, plus split membership."""

    ids: list[str]
    motion: np.ndarray          # (N, T, C)
    content: np.ndarray         # (N, T, d_c)
    rhythm: np.ndarray          # (N, T, d_r)
    emotion: np.ndarray         # (N, T, d_e)
    styles: np.ndarray          # (N,) style label
    emotion_ids: np.ndarray     # (N,)
    beats: list[np.ndarray]
    layout: PartLayout
    fps: float
    splits: dict[str, list[str]]

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, split: str) -> np.ndarray:
        pos = {cid: i for i, cid in enumerate(self.ids)}
        return np.array(sorted(pos[c] for c in self.splits[split]), dtype=np.int64)

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        keep = {self.ids[i] for i in idx}
        return Dataset([self.ids[i] for i in idx], self.motion[idx], self.content[idx], self.rhythm[idx],
                       self.emotion[idx], self.styles[idx], self.emotion_ids[idx],
                       [self.beats[i] for i in idx], self.layout, self.fps,
                       {k: [c for c in v if c in keep] for k, v in self.splits.items()})

    def speech(self, i: int) -> SpeechFeatures:
        return SpeechFeatures(self.content[i], self.rhythm[i], self.emotion[i], self.fps,
                              self.beats[i], int(self.emotion_ids[i]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.motion, self.content, self.rhythm, self.emotion, self.styles, self.emotion_ids):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps({"ids": self.ids, "splits": self.splits}, sort_keys=True).encode())
        return h.hexdigest()


def make_dataset(n_styles: int = 4, clips_per_style: int = 200, n_frames: int = DEFAULT_FRAMES,
                 channels=DEFAULT_CHANNELS, fps: float = DEFAULT_FPS, seed: int = 0,
                 dims=DEFAULT_DIMS, ratios=(0.85, 0.075, 0.075)) -> Dataset:
    """Clips for every style with random tempo, beat phase and emotion per clip."""
    layout = make_part_layout(channels)
    styles = default_styles(layout, n_styles)
    rng = np.random.default_rng(seed)
    ids, motion, speech, labels = [], [], [], []
    for k, style in enumerate(styles):
        for i in range(clips_per_style):
            tempo = rng.uniform(*TEMPO_RANGE)
            emotion = int(rng.integers(N_EMOTIONS))
            phase = rng.uniform(0.0, 60.0 / tempo)
            clip_seed = int(rng.integers(2 ** 31))
            sp = synth_speech(tempo, emotion, n_frames, fps, seed=clip_seed, dims=dims, phase=phase)
            clip = synth_motion(style, sp, n_frames, seed=clip_seed + 1, fps=fps)
            ids.append(f"s{k}_{i:04d}")
            motion.append(clip.values)
            speech.append(sp)
            labels.append(k)
    splits = split_dataset(list(zip(ids, labels)), ratios, seed)
    return Dataset(ids, np.stack(motion), np.stack([s.content for s in speech]),
                   np.stack([s.rhythm for s in speech]), np.stack([s.emotion for s in speech]),
                   np.asarray(labels), np.array([s.emotion_id for s in speech]),
                   [s.beat_times for s in speech], layout, float(fps), splits)


def save_dataset(root: str | Path, ds: Dataset, extra: dict | None = None) -> dict:
    """Write clip and feature files plus a JSON manifest; returns the manifest."""
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(parents=True, exist_ok=True)
    split_of = {c: name for name, ids in ds.splits.items() for c in ids}
    entries = []
    for i, cid in enumerate(ds.ids):
        clip = MotionClip(ds.motion[i], ds.fps, ds.layout, int(ds.styles[i]), int(ds.styles[i]),
                          {"emotion_id": int(ds.emotion_ids[i])})
        save_clip(root / "clips" / f"{cid}.mpc", clip)
        save_features(root / "features" / f"{cid}.mpc", ds.speech(i))
        entries.append({"id": cid, "clip": f"clips/{cid}.mpc", "features": f"features/{cid}.mpc",
                        "style": int(ds.styles[i]), "split": split_of[cid]})
    manifest = {"layout": ds.layout.to_json(), "fps": ds.fps, "clips": entries, "digest": ds.digest(),
                **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run synth-data first")
    manifest = json.loads(path.read_text())
    clips = [load_clip(root / e["clip"]) for e in manifest["clips"]]
    feats = [load_features(root / e["features"]) for e in manifest["clips"]]
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for e in manifest["clips"]:
        splits[e["split"]].append(e["id"])
    return Dataset([e["id"] for e in manifest["clips"]], np.stack([c.values for c in clips]),
                   np.stack([f.content for f in feats]), np.stack([f.rhythm for f in feats]),
                   np.stack([f.emotion for f in feats]), np.array([e["style"] for e in manifest["clips"]]),
                   np.array([f.emotion_id for f in feats]), [f.beat_times for f in feats],
                   PartLayout.from_json(manifest["layout"]), float(manifest["fps"]), splits)
