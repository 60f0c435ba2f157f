"""Per-part residual-quantised motion autoencoder.

A temporal conv encoder downsamples a part clip by 4 into latent tokens, a
stack of codebooks quantises the tokens residual-by-residual, and a mirrored
decoder maps the quantised sum back to frames. Codebooks learn by EMA with
dead-entry re-seeding; encoder and decoder learn through a straight-through
estimator.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tape, Tensor
from .numerics.nn import Adam, Conv1d, Module
from .numerics.serialize import FormatError, load_named, save_named

DOWNSCALE = 4


@dataclass
class RvqConfig:
    in_channels: int
    hidden: int = 128
    latent_dim: int = 16
    n_layers: int = 6
    codebook_size: int = 64
    downscale: int = DOWNSCALE
    quantizer_dropout: float = 0.2
    conv_dropout: float = 0.0
    beta: float = 0.25
    ema_decay: float = 0.99
    dead_threshold: float = 1.0
    lr: float = 2e-4
    batch_size: int = 32
    steps: int = 1500
    seed: int = 0


@dataclass
class Codebooks:
    """V x K x d entries plus the EMA statistics that drive them.

    Entry 0 of every layer is pinned to the zero vector, so a layer can always
    leave the residual unchanged and residual norms never grow with depth.
    """

    entries: np.ndarray
    usage: np.ndarray
    embed_sum: np.ndarray
    initialised: bool = False

    def __post_init__(self):
        if self.entries.ndim != 3 or self.entries.shape[0] < 1 or self.entries.shape[1] < 2:
            raise ValueError("codebooks need V >= 1 layers of at least 2 entries")
        self.pin_zero()

    def pin_zero(self) -> None:
        self.entries[:, 0] = 0.0
        self.embed_sum[:, 0] = 0.0

    @classmethod
    def create(cls, n_layers: int, size: int, dim: int, rng: np.random.Generator) -> "Codebooks":
        entries = rng.normal(scale=0.1, size=(n_layers, size, dim))
        return cls(entries, np.zeros((n_layers, size)), np.zeros_like(entries))

    @property
    def n_layers(self) -> int:
        return self.entries.shape[0]

    @property
    def size(self) -> int:
        return self.entries.shape[1]

    @property
    def dim(self) -> int:
        return self.entries.shape[2]


def quantize_layer(r: np.ndarray, codebook: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry per token (squared Euclidean distance, lowest index on ties)."""
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("codebook layer is empty")
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != codebook.shape[1]:
        raise ValueError(f"token dim {r.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = r.reshape(-1, r.shape[-1])
    idx = np.empty(flat.shape[0], dtype=np.int64)
    for s in range(0, flat.shape[0], chunk):
        diff = flat[s:s + chunk, None, :] - codebook[None, :, :]
        idx[s:s + chunk] = np.argmin((diff * diff).sum(-1), axis=1)
    return codebook[idx].reshape(r.shape), idx.reshape(r.shape[:-1])


@dataclass
class RQResult:
    quantized: np.ndarray
    zs: list[np.ndarray]
    indices: list[np.ndarray]
    residuals: list[np.ndarray]
    depth: int
    dropped: bool

    @property
    def remainder(self) -> np.ndarray:
        return self.residuals[-1]


def rq_forward(latent: np.ndarray, codebooks: Codebooks | np.ndarray, mode: str = "eval",
               rng: np.random.Generator | None = None, dropout: float = 0.2) -> RQResult:
    """Layer-by-layer residual quantisation.

    In ``train`` mode, with probability ``dropout`` the stack is truncated at a
    depth drawn uniformly from 1..V. ``residuals`` holds r^1 .. r^{V'+1}.
    """
    entries = codebooks.entries if isinstance(codebooks, Codebooks) else np.asarray(codebooks)
    n_layers = entries.shape[0]
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    depth, dropped = n_layers, False
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        if rng.random() < dropout:
            dropped = True
            depth = int(rng.integers(1, n_layers + 1))
    r = np.asarray(latent, dtype=np.float64)
    residuals, zs, indices = [r], [], []
    total = np.zeros_like(r)
    for v in range(depth):
        z, idx = quantize_layer(r, entries[v])
        zs.append(z)
        indices.append(idx)
        total = total + z
        r = r - z
        residuals.append(r)
    return RQResult(total, zs, indices, residuals, depth, dropped)


def rvq_loss(m, m_hat, residuals: Sequence, quantized: Sequence, beta: float) -> Tensor:
    """Mean absolute reconstruction error plus beta times the summed per-layer
    commitment ``mean((r^v - sg[z^v])^2)``; gradients reach ``r^v`` only."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    m, m_hat = nx.as_tensor(m), nx.as_tensor(m_hat)
    if m.shape != m_hat.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {m_hat.shape}")
    loss = nx.mean(nx.absolute(m_hat - m))
    if beta and residuals:
        commit = None
        for r, z in zip(residuals, quantized):
            d = nx.as_tensor(r) - nx.stop_gradient(z)
            term = nx.mean(d * d)
            commit = term if commit is None else commit + term
        loss = loss + beta * commit
    return loss


class ResBlock(Module):
    def __init__(self, width: int, rng: np.random.Generator, dropout: float = 0.0):
        self.conv1 = Conv1d(width, width, 3, rng)
        self.conv2 = Conv1d(width, width, 3, rng, scale=0.5)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = self.conv1(nx.gelu(x))
        if self.dropout and rng is not None:
            keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
            h = h * keep
        return x + self.conv2(nx.gelu(h))


class RvqModel(Module):
    def __init__(self, config: RvqConfig, rng: np.random.Generator | None = None):
        if config.downscale != 4:
            raise ValueError("only downscale 4 (two stride-2 stages) is supported")
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        c, h, d = config.in_channels, config.hidden, config.latent_dim
        drop = config.conv_dropout
        self.enc_in = Conv1d(c, h, 3, rng)
        self.enc_res0 = ResBlock(h, rng, drop)
        self.enc_down1 = Conv1d(h, h, 4, rng, stride=2, padding=1)
        self.enc_res1 = ResBlock(h, rng, drop)
        self.enc_down2 = Conv1d(h, h, 4, rng, stride=2, padding=1)
        self.enc_res2 = ResBlock(h, rng, drop)
        self.enc_out = Conv1d(h, d, 3, rng)

        self.dec_in = Conv1d(d, h, 3, rng)
        self.dec_res0 = ResBlock(h, rng, drop)
        self.dec_up1 = Conv1d(h, h, 3, rng)
        self.dec_res1 = ResBlock(h, rng, drop)
        self.dec_up2 = Conv1d(h, h, 3, rng)
        self.dec_res2 = ResBlock(h, rng, drop)
        self.dec_out = Conv1d(h, c, 3, rng)
        self.codebooks = Codebooks.create(config.n_layers, config.codebook_size, d, rng)

    # codec --------------------------------------------------------------------
    def _check_length(self, n_frames: int) -> None:
        if n_frames % self.config.downscale:
            raise ValueError(f"clip length {n_frames} not divisible by {self.config.downscale}")

    def encoder(self, x, rng=None) -> Tensor:
        x = nx.as_tensor(x)
        self._check_length(x.shape[1])
        h = self.enc_in(x)
        h = self.enc_res0(h, rng)
        h = self.enc_res1(self.enc_down1(h), rng)
        h = self.enc_res2(self.enc_down2(h), rng)
        return self.enc_out(nx.gelu(h))

    def decoder(self, z, rng=None) -> Tensor:
        h = self.dec_in(nx.as_tensor(z))
        h = self.dec_res0(h, rng)
        h = self.dec_res1(self.dec_up1(nx.repeat(h, 2, axis=1)), rng)
        h = self.dec_res2(self.dec_up2(nx.repeat(h, 2, axis=1)), rng)
        return self.dec_out(nx.gelu(h))

    def encode(self, part_clip: np.ndarray) -> np.ndarray:
        """(T, C) or (B, T, C) frames -> (n, d) or (B, n, d) continuous latents."""
        x = np.asarray(part_clip, dtype=np.float64)
        single = x.ndim == 2
        out = self.encoder(x[None] if single else x).data
        return out[0] if single else out

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        single = z.ndim == 2
        out = self.decoder(z[None] if single else z).data
        return out[0] if single else out

    def quantize(self, latent: np.ndarray) -> RQResult:
        return rq_forward(latent, self.codebooks, "eval")

    def reconstruct(self, part_clip: np.ndarray) -> np.ndarray:
        return self.decode(self.quantize(self.encode(part_clip)).quantized)

    # training -----------------------------------------------------------------
    def loss(self, x: np.ndarray, rng: np.random.Generator, train: bool = True,
             frozen: tuple[RQResult, np.ndarray] | None = None) -> tuple[Tensor, RQResult, Tensor]:
        """Codec loss with a straight-through quantiser.

        ``frozen=(codes, offset)`` reuses fixed codes and quantisation offset
        instead of re-quantising; the loss is then smooth in the parameters
        and its exact gradient equals the straight-through gradient.
        """
        xt = Tensor(x)
        drop_rng = rng if (train and self.config.conv_dropout) else None
        r1 = self.encoder(xt, drop_rng)
        if frozen is None:
            res = rq_forward(r1.data, self.codebooks, "train" if train else "eval", rng,
                             self.config.quantizer_dropout)
            offset = res.quantized - r1.data
        else:
            res, offset = frozen
        q = r1 + nx.stop_gradient(offset)
        x_hat = self.decoder(q, drop_rng)
        prefix = np.zeros_like(r1.data)
        residual_terms = []
        for z in res.zs:
            residual_terms.append(r1 - prefix)
            prefix = prefix + z
        loss = rvq_loss(xt, x_hat, residual_terms, res.zs, self.config.beta)
        return loss, res, r1

    def init_codebooks(self, latent: np.ndarray, rng: np.random.Generator) -> None:
        """Seed every layer from random residual tokens of a latent batch."""
        r = latent.reshape(-1, latent.shape[-1])
        cb = self.codebooks
        for v in range(cb.n_layers):
            pick = rng.choice(r.shape[0], cb.size, replace=r.shape[0] < cb.size)
            cb.entries[v] = r[pick] + 1e-3 * rng.normal(size=(cb.size, cb.dim))
            cb.usage[v] = 1.0
            cb.embed_sum[v] = cb.entries[v].copy()
            cb.entries[v, 0] = 0.0
            cb.embed_sum[v, 0] = 0.0
            r = r - quantize_layer(r, cb.entries[v])[0]
        cb.initialised = True

    def ema_update(self, res: RQResult, rng: np.random.Generator) -> int:
        """EMA codebook update for the layers used; returns the number of re-seeded entries."""
        cb, decay = self.codebooks, self.config.ema_decay
        n_reset = 0
        for v in range(res.depth):
            r = res.residuals[v].reshape(-1, cb.dim)
            idx = res.indices[v].reshape(-1)
            counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
            sums = np.zeros((cb.size, cb.dim))
            np.add.at(sums, idx, r)
            cb.usage[v] = decay * cb.usage[v] + (1 - decay) * counts
            cb.embed_sum[v] = decay * cb.embed_sum[v] + (1 - decay) * sums
            total = cb.usage[v].sum()
            smoothed = (cb.usage[v] + 1e-5) / (total + cb.size * 1e-5) * total
            cb.entries[v] = cb.embed_sum[v] / smoothed[:, None]
            dead = np.flatnonzero(cb.usage[v][1:] < self.config.dead_threshold) + 1
            if dead.size:
                pick = rng.choice(r.shape[0], dead.size, replace=r.shape[0] < dead.size)
                cb.entries[v, dead] = r[pick] + 1e-3 * rng.normal(size=(dead.size, cb.dim))
                cb.usage[v, dead] = self.config.dead_threshold
                cb.embed_sum[v, dead] = cb.entries[v, dead] * self.config.dead_threshold
                n_reset += dead.size
        cb.pin_zero()
        return n_reset

    # persistence ----------------------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None, extra_tensors: dict | None = None) -> None:
        named = {f"param.{k}": v for k, v in self.state_dict().items()}
        named["codebook.entries"] = self.codebooks.entries
        named["codebook.usage"] = self.codebooks.usage
        named["codebook.embed_sum"] = self.codebooks.embed_sum
        named.update(extra_tensors or {})
        header = {"kind": "rvq", "config": asdict(self.config), "extra": extra or {}}
        save_named(path, header, named)

    @classmethod
    def load(cls, path: str | Path) -> tuple["RvqModel", dict, dict]:
        header, named = load_named(path)
        if header.get("kind") != "rvq":
            raise FormatError(f"{path}: not an rvq checkpoint")
        model = cls(RvqConfig(**header["config"]))
        model.load_state_dict({k[6:]: v for k, v in named.items() if k.startswith("param.")})
        model.codebooks = Codebooks(named["codebook.entries"], named["codebook.usage"],
                                    named["codebook.embed_sum"], initialised=True)
        rest = {k: v for k, v in named.items() if not k.startswith(("param.", "codebook."))}
        return model, header.get("extra", {}), rest


def codebook_usage(model: RvqModel, part_clips: np.ndarray, batch: int = 64) -> np.ndarray:
    """Assignment counts per (layer, entry) over a dataset in eval mode."""
    cb = model.codebooks
    counts = np.zeros((cb.n_layers, cb.size), dtype=np.int64)
    for s in range(0, len(part_clips), batch):
        res = model.quantize(model.encode(part_clips[s:s + batch]))
        for v, idx in enumerate(res.indices):
            counts[v] += np.bincount(idx.reshape(-1), minlength=cb.size)
    return counts


def reconstruction_l1(model: RvqModel, part_clips: np.ndarray, batch: int = 64) -> float:
    errs = []
    for s in range(0, len(part_clips), batch):
        x = part_clips[s:s + batch]
        errs.append(np.abs(model.reconstruct(x) - x).mean() * len(x))
    return float(np.sum(errs) / len(part_clips))


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.entries.append(row)

    def losses(self) -> np.ndarray:
        return np.array([e["loss"] for e in self.entries])

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")


def smoothed(values: np.ndarray, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    w = max(1, min(window, len(values)))
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def train_rvq(part_clips: np.ndarray, config: RvqConfig, model: RvqModel | None = None,
              optimizer_state: dict | None = None, start_step: int = 0,
              rng_state: dict | None = None,
              on_step: Callable[[int, dict], None] | None = None) -> tuple[RvqModel, TrainLog, Adam, np.random.Generator]:
    """Fit one part's codec on an array of part clips (N, T, C)."""
    part_clips = np.asarray(part_clips, dtype=np.float64)
    if part_clips.ndim != 3 or len(part_clips) == 0:
        raise ValueError("training needs a non-empty (N, T, C) array of part clips")
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    model = model or RvqModel(config, np.random.default_rng(config.seed + 1))
    opt = Adam(model.named_parameters(), lr=config.lr, clip_norm=1.0)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    log = TrainLog()
    n = len(part_clips)
    for step in range(start_step, config.steps):
        t0 = time.perf_counter()
        batch = part_clips[rng.choice(n, min(config.batch_size, n), replace=n < config.batch_size)]
        if not model.codebooks.initialised:
            model.init_codebooks(model.encode(batch), rng)
        with Tape() as tape:
            loss, res, _ = model.loss(batch, rng, train=True)
        grads = tape.backward(loss)
        gnorm = opt.step(grads)
        n_reset = model.ema_update(res, rng)
        row = {"step": step, "loss": loss.item(), "depth": res.depth, "resets": n_reset,
               "grad_norm": gnorm, "sec": time.perf_counter() - t0}
        log.append(**row)
        if on_step is not None:
            on_step(step, row)
    return model, log, opt, rng


def export_indices(model: RvqModel, part_clips: np.ndarray, path: str | Path) -> None:
    """Write per-layer code indices of a batch as u16 tensors."""
    if model.codebooks.size > 65536:
        raise ValueError("codebook too large for u16 indices")
    res = model.quantize(model.encode(part_clips))
    from .numerics.serialize import write_container
    write_container(path, {"kind": "rvq_indices", "n_layers": len(res.indices)},
                    [idx.astype(np.uint16) for idx in res.indices])
