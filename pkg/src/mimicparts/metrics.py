"""Gesture metrics: FGD, beat consistency, diversity and style recognition accuracy."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .body import PartLayout, split_clip
from .numerics import Tape, Tensor
from .numerics.nn import Adam

EIG_TOL = 1e-10


# Frechet distance ----------------------------------------------------------------------

def matrix_sqrt_psd(a: np.ndarray, tol: float = EIG_TOL) -> np.ndarray:
    """Symmetric PSD square root through an eigendecomposition."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    sym = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(w).max())) if w.size else 1.0
    if w.size and w.min() < -tol * scale:
        raise ValueError(f"matrix has a negative eigenvalue {w.min():.3e}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass
class FeatureDist:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureDist":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise ValueError("need at least two feature vectors")
        cov = np.atleast_2d(np.cov(f, rowvar=False))
        return cls(f.mean(axis=0), 0.5 * (cov + cov.T), len(f))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fgd(a: FeatureDist, b: FeatureDist) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), via the symmetric form sqrt(rS_a S_b rS_a)."""
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    root_a = matrix_sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = np.trace(matrix_sqrt_psd(0.5 * (inner + inner.T), tol=1e-8))
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)


# beat consistency ----------------------------------------------------------------------

def motion_beats(values: np.ndarray, fps: float, percentile: float = 25.0) -> np.ndarray:
    """Times of local minima of joint-velocity magnitude below the given percentile of velocity."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("empty clip")
    if x.shape[0] < 3:
        return np.zeros(0)
    speed = np.linalg.norm(np.gradient(x, axis=0), axis=1)
    thresh = np.percentile(speed, percentile)
    mid = speed[1:-1]
    is_min = (mid < speed[:-2]) & (mid <= speed[2:]) & (mid <= thresh)
    return (np.flatnonzero(is_min) + 1) / fps


def bc_score(m_beats: np.ndarray, a_beats: np.ndarray, sigma: float) -> float:
    """Mean over audio beats of exp(-d^2 / 2 sigma^2), d the distance to the nearest motion beat."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    a_beats = np.asarray(a_beats, dtype=np.float64)
    if a_beats.size == 0:
        raise ValueError("no audio beats")
    m_beats = np.asarray(m_beats, dtype=np.float64)
    if m_beats.size == 0:
        return 0.0
    d = np.abs(a_beats[:, None] - m_beats[None, :]).min(axis=1)
    return float(np.mean(np.exp(-d * d / (2 * sigma * sigma))))


def beat_consistency(values: np.ndarray, audio_beats: np.ndarray, fps: float, sigma: float = 0.1,
                     channels: Sequence[int] | None = None) -> float:
    x = np.asarray(values, dtype=np.float64)
    if channels is not None:
        x = x[:, list(channels)]
    return bc_score(motion_beats(x, fps), audio_beats, sigma)


def mean_bc(clips: np.ndarray, beats: Sequence[np.ndarray], fps: float, sigma: float = 0.1,
            channels: Sequence[int] | None = None) -> float:
    return float(np.mean([beat_consistency(c, b, fps, sigma, channels) for c, b in zip(clips, beats)]))


# diversity -----------------------------------------------------------------------------

def diversity(clips: np.ndarray, n_pairs: int | None = None, seed: int = 0,
              channels: Sequence[int] | None = None) -> float:
    """Mean per-element L1 distance over unordered clip pairs (all pairs, or a seeded sample)."""
    x = np.asarray(clips, dtype=np.float64)
    if x.ndim < 2 or len(x) < 2:
        raise ValueError("need at least two clips of equal shape")
    if channels is not None:
        x = x[..., list(channels)]
    pairs = list(combinations(range(len(x)), 2))
    if n_pairs is not None and n_pairs < len(pairs):
        pick = np.random.default_rng(seed).choice(len(pairs), n_pairs, replace=False)
        pairs = [pairs[i] for i in np.sort(pick)]
    return float(np.mean([np.abs(x[i] - x[j]).mean() for i, j in pairs]))


def as_clip_array(clips) -> np.ndarray:
    arrs = [getattr(c, "values", c) for c in clips]
    shapes = {np.shape(a) for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"clips differ in shape: {sorted(shapes)}")
    return np.stack(arrs)


# style recognition ---------------------------------------------------------------------

N_FREQ_BINS = 8


def style_features(clips: np.ndarray, fps: float, layout: PartLayout) -> np.ndarray:
    """Per-part descriptors: per-channel mean and std, plus a coarse velocity-free power spectrum."""
    x = np.asarray(clips, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    feats = []
    edges = np.linspace(0.2, 3.4, N_FREQ_BINS + 1)
    freqs = np.fft.rfftfreq(x.shape[1], d=1.0 / fps)
    for part in split_clip(x, layout):
        centred = part - part.mean(axis=1, keepdims=True)
        power = (np.abs(np.fft.rfft(centred * np.hanning(x.shape[1])[None, :, None], axis=1)) ** 2).sum(axis=2)
        power /= power.sum(axis=1, keepdims=True) + 1e-12
        bins = np.stack([power[:, (freqs >= lo) & (freqs < hi)].sum(axis=1) for lo, hi in zip(edges, edges[1:])], 1)
        feats += [part.mean(axis=1), part.std(axis=1), bins]
    return np.concatenate(feats, axis=1)


class StyleClassifier:
    """Multinomial logistic regression over standardised style descriptors."""

    def __init__(self, layout: PartLayout, fps: float, n_classes: int):
        self.layout, self.fps, self.n_classes = layout, fps, n_classes
        self.mu = self.sd = self.w = self.b = None

    def _x(self, clips) -> np.ndarray:
        f = style_features(clips, self.fps, self.layout)
        return (f - self.mu) / self.sd

    def fit(self, clips: np.ndarray, labels: np.ndarray, steps: int = 400, lr: float = 0.05,
            l2: float = 1e-3, seed: int = 0) -> "StyleClassifier":
        f = style_features(clips, self.fps, self.layout)
        self.mu, self.sd = f.mean(axis=0), f.std(axis=0) + 1e-8
        x = (f - self.mu) / self.sd
        y = np.asarray(labels)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels outside the classifier's label space")
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(0, 0.01, size=(x.shape[1], self.n_classes)), requires_grad=True)
        b = Tensor(np.zeros(self.n_classes), requires_grad=True)
        opt = Adam([("w", w), ("b", b)], lr=lr)
        onehot = np.eye(self.n_classes)[y]
        for _ in range(steps):
            with Tape() as tape:
                logp = nx.log_softmax(nx.matmul(Tensor(x), w) + b, axis=-1)
                loss = -nx.mean(nx.tsum(logp * onehot, axis=-1)) + l2 * nx.tsum(w * w)
            opt.step(tape.backward(loss))
        self.w, self.b = w.data, b.data
        return self

    def predict(self, clips) -> np.ndarray:
        return np.argmax(self._x(clips) @ self.w + self.b, axis=1)

    def accuracy(self, clips, labels) -> float:
        return float(np.mean(self.predict(clips) == np.asarray(labels)))

    def state(self) -> dict[str, np.ndarray]:
        return {"clf.mu": self.mu, "clf.sd": self.sd, "clf.w": self.w, "clf.b": self.b}

    @classmethod
    def from_state(cls, layout: PartLayout, fps: float, state: dict) -> "StyleClassifier":
        clf = cls(layout, fps, state["clf.w"].shape[1])
        clf.mu, clf.sd, clf.w, clf.b = state["clf.mu"], state["clf.sd"], state["clf.w"], state["clf.b"]
        return clf


def sra(clips, intended: Sequence[int], classifier: StyleClassifier) -> float:
    intended = np.asarray(intended)
    if intended.size and (intended.min() < 0 or intended.max() >= classifier.n_classes):
        raise ValueError("intended labels outside the classifier's label space")
    return classifier.accuracy(clips, intended)


# reports -------------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_report(rows: list[dict], json_path: str | Path, csv_path: str | Path | None = None) -> None:
    """Rows of {metric, scope, value, n, config_hash} as JSON plus an optional CSV."""
    Path(json_path).write_text(json.dumps(rows, indent=1))
    if csv_path is not None:
        keys = ["metric", "scope", "value", "n", "config_hash"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
