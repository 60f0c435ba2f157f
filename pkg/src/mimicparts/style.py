"""Contrastive part-aware style encoder.

One small transformer per body part maps that part's channels to a style
vector. Training pairs are the two halves of a clip; NT-Xent pulls halves of
the same clip together and pushes other clips in the batch apart.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .body import PartLayout, split_clip
from .numerics import Tape, Tensor
from .numerics.nn import Adam, LayerNorm, Linear, Module, TransformerEncoderLayer, sinusoidal_positions
from .numerics.serialize import FormatError, load_named, save_named
from .rvq import TrainLog

MASK = -1e30


@dataclass
class StyleConfig:
    part_channels: tuple[int, ...] = (24, 18, 10)
    d_style: int = 64
    n_layers: int = 2
    n_heads: int = 2
    tau: float = 0.1
    half_frames: int = 64
    patch: int = 4  # frames per transformer token
    mode: str = "part"  # "part": one encoder per part; "global": one full-body encoder shared by all parts
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 600
    seed: int = 0

    def __post_init__(self):
        self.part_channels = tuple(int(c) for c in self.part_channels)
        if self.mode not in ("part", "global"):
            raise ValueError(f"unknown style encoder mode {self.mode!r}")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.patch < 1 or self.half_frames % self.patch:
            raise ValueError("patch must divide half_frames")


def make_pairs(clips: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split (N, 2T, C) clips into 2N half-clips: all first halves, then all second halves."""
    clips = np.asarray(clips)
    if clips.ndim != 3:
        raise ValueError("expected a (N, frames, channels) batch")
    n, length = clips.shape[:2]
    if length % 2:
        raise ValueError(f"clip length {length} is odd")
    half = length // 2
    views = np.concatenate([clips[:, :half], clips[:, half:]], axis=0)
    return views, np.concatenate([np.arange(n), np.arange(n)])


def _positives(pair_ids: np.ndarray) -> np.ndarray:
    pair_ids = np.asarray(pair_ids)
    pos = np.empty(len(pair_ids), dtype=np.int64)
    for i, p in enumerate(pair_ids):
        mates = np.flatnonzero((pair_ids == p) & (np.arange(len(pair_ids)) != i))
        if len(mates) != 1:
            raise ValueError("every pair id must occur exactly twice")
        pos[i] = mates[0]
    return pos


def nt_xent(embeddings, pair_ids: Sequence[int], tau: float) -> Tensor:
    """Normalised-temperature cross entropy averaged over every anchor (both orientations of each pair).

    The denominator of anchor i runs over all k != i, positive included.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    e = nx.as_tensor(embeddings)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError("need a (2N, d) embedding matrix with N >= 1")
    pos = _positives(pair_ids)
    z = nx.l2_normalize(e, axis=-1)
    sim = nx.matmul(z, z.T) * (1.0 / tau)
    logits = sim + np.diag(np.full(e.shape[0], MASK))
    logp = nx.log_softmax(logits, axis=-1)
    return -nx.mean(logp[np.arange(e.shape[0]), pos])


class PartEncoder(Module):
    def __init__(self, n_in: int, cfg: StyleConfig, rng: np.random.Generator):
        self.proj = Linear(n_in * cfg.patch, cfg.d_style, rng)
        self.layers = [TransformerEncoderLayer(cfg.d_style, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.norm = LayerNorm(cfg.d_style)
        self.d_style = cfg.d_style
        self.patch = cfg.patch

    def __call__(self, x) -> Tensor:
        x = nx.as_tensor(x)
        b, t, c = x.shape
        if t % self.patch:
            raise ValueError(f"clip length {t} not divisible by patch size {self.patch}")
        n = t // self.patch
        h = self.proj(x.reshape(b, n, self.patch * c)) + sinusoidal_positions(n, self.d_style)
        for layer in self.layers:
            h = layer(h)
        return nx.mean(self.norm(h), axis=1)


class StyleEncoderModel(Module):
    def __init__(self, config: StyleConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        if config.mode == "part":
            self.encoders = [PartEncoder(c, config, rng) for c in config.part_channels]
        else:
            self.encoders = [PartEncoder(sum(config.part_channels), config, rng)]

    @property
    def n_parts(self) -> int:
        return len(self.config.part_channels)

    def check_layout(self, layout: PartLayout) -> None:
        if layout.sizes != self.config.part_channels:
            raise ValueError(f"layout part sizes {layout.sizes} != encoder {self.config.part_channels}")

    def part_forward(self, parts: Sequence) -> list[Tensor]:
        """Style vectors per part from per-part inputs (each (B, T, C_i))."""
        if self.config.mode == "part":
            return [enc(p) for enc, p in zip(self.encoders, parts)]
        s = self.encoders[0](nx.concat([nx.as_tensor(p) for p in parts], axis=-1))
        return [s] * self.n_parts

    def loss(self, parts: Sequence[np.ndarray]) -> Tensor:
        """Summed NT-Xent over parts for a batch of (N, 2T, C_i) part clips."""
        total = None
        views = []
        for p in parts:
            v, ids = make_pairs(p)
            views.append(v)
        outs = self.part_forward(views)
        if self.config.mode == "global":
            outs = outs[:1]
        for s in outs:
            term = nt_xent(s, ids, self.config.tau)
            total = term if total is None else total + term
        return total

    def save(self, path: str | Path, extra: dict | None = None, extra_tensors: dict | None = None) -> None:
        header = {"kind": "style", "config": asdict(self.config), "extra": extra or {}}
        named = {f"param.{k}": v for k, v in self.state_dict().items()}
        named.update(extra_tensors or {})
        save_named(path, header, named)

    @classmethod
    def load(cls, path: str | Path) -> tuple["StyleEncoderModel", dict, dict]:
        header, named = load_named(path)
        if header.get("kind") != "style":
            raise FormatError(f"{path}: not a style encoder checkpoint")
        model = cls(StyleConfig(**header["config"]))
        model.load_state_dict({k[6:]: v for k, v in named.items() if k.startswith("param.")})
        rest = {k: v for k, v in named.items() if not k.startswith("param.")}
        return model, header.get("extra", {}), rest


def encode_style(clips: np.ndarray, model: StyleEncoderModel, layout: PartLayout, batch: int = 64) -> np.ndarray:
    """(T, C) -> (P, d_s) or (B, T, C) -> (B, P, d_s) style vectors, un-normalised."""
    model.check_layout(layout)
    x = np.asarray(clips, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = []
    for s in range(0, len(x), batch):
        parts = split_clip(x[s:s + batch], layout)
        out.append(np.stack([t.data for t in model.part_forward(parts)], axis=1))
    res = np.concatenate(out)
    return res[0] if single else res


def train_style(clips: np.ndarray, layout: PartLayout, config: StyleConfig,
                model: StyleEncoderModel | None = None, optimizer_state: dict | None = None,
                start_step: int = 0, rng_state: dict | None = None,
                on_step: Callable[[int, dict], None] | None = None) -> tuple[StyleEncoderModel, TrainLog, Adam, np.random.Generator]:
    """Fit the style encoder on (N, T, C) clips; each step crops 2*half_frames windows."""
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 3 or len(clips) == 0:
        raise ValueError("training needs a non-empty (N, T, C) clip array")
    window = 2 * config.half_frames
    if clips.shape[1] < window:
        raise ValueError(f"clips of {clips.shape[1]} frames are shorter than the {window}-frame window")
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    model = model or StyleEncoderModel(config, np.random.default_rng(config.seed + 1))
    model.check_layout(layout)
    opt = Adam(model.named_parameters(), lr=config.lr, clip_norm=1.0)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    log = TrainLog()
    n = len(clips)
    for step in range(start_step, config.steps):
        t0 = time.perf_counter()
        pick = rng.choice(n, min(config.batch_size, n), replace=False)
        starts = rng.integers(0, clips.shape[1] - window + 1, size=len(pick))
        batch = np.stack([clips[i, s:s + window] for i, s in zip(pick, starts)])
        with Tape() as tape:
            loss = model.loss(split_clip(batch, layout))
        gnorm = opt.step(tape.backward(loss))
        row = {"step": step, "loss": loss.item(), "grad_norm": gnorm, "sec": time.perf_counter() - t0}
        log.append(**row)
        if on_step is not None:
            on_step(step, row)
    return model, log, opt, rng


def dump_embeddings_csv(path: str | Path, clip_ids: Sequence[str], embeddings: np.ndarray,
                        part_names: Sequence[str]) -> None:
    """One row per (clip, part): clip id, part name, then the d_s values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = embeddings.shape[-1]
        w.writerow(["clip_id", "part"] + [f"s{k}" for k in range(d)])
        for cid, emb in zip(clip_ids, embeddings):
            for name, vec in zip(part_names, emb):
                w.writerow([cid, name] + [repr(float(v)) for v in vec])
