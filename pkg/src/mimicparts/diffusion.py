"""Part-aware latent diffusion with incremental classifier-free guidance.

The denoiser keeps the three body parts as separate token streams of width
``P = d_model / 3``. Every attention or feed-forward sub-layer acts on one part
at a time with its own weights; the only cross-part mixing is the linear
fusion after each attention block. Style and content enter through the token
inputs, rhythm and emotion through cross-attention.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tape, Tensor
from .numerics.nn import Adam, Linear, Module, sinusoidal_embedding
from .numerics.serialize import FormatError, load_named, save_named
from .rvq import TrainLog

GROUPS = ("style", "content", "rhythm_emotion")
LOCALITY_INIT = 0.5  # initial score penalty per token of query-to-frame distance


# noise schedule ----------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Tables indexed by t = 0..T; entry 0 is the clean state (alpha_bar = 1)."""

    alphas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1 or np.any(a <= 0) or np.any(a >= 1):
            raise ValueError("alphas must lie strictly inside (0, 1)")
        self.alphas = np.concatenate([[1.0], a])
        self.alpha_bar = np.cumprod(self.alphas)

    @property
    def n_steps(self) -> int:
        return len(self.alphas) - 1

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def posterior_variance(self, t: int, t_prev: int) -> float:
        ab_t, ab_p = self.alpha_bar[t], self.alpha_bar[t_prev]
        return float((1 - ab_p) / (1 - ab_t) * (1 - ab_t / ab_p))

    def to_json(self) -> dict:
        return {"kind": self.kind, "n_steps": self.n_steps,
                "sha256": hashlib.sha256(self.alphas.tobytes()).hexdigest()}


def make_schedule(n_steps: int, kind: str = "cosine") -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError("need at least one diffusion step")
    if kind == "linear":
        scale = 1000.0 / n_steps
        betas = np.linspace(1e-4 * scale, min(0.02 * scale, 0.999), n_steps)
    elif kind == "cosine":
        s = 0.008
        x = np.arange(n_steps + 1) / n_steps
        f = np.cos((x + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(1.0 - betas, kind)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal draw z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps (t per sample or scalar)."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.n_steps):
        raise ValueError(f"t must lie in [1, {schedule.n_steps}]")
    ab = schedule.alpha_bar[t].reshape(t.shape + (1,) * (np.ndim(z0) - t.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps


def q_step(z_prev: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """One forward step q(z_t | z_{t-1})."""
    a = schedule.alphas[t]
    return np.sqrt(a) * z_prev + np.sqrt(1 - a) * eps


# conditions --------------------------------------------------------------------------

@dataclass
class Conditions:
    """Condition streams for a batch; ``None`` means the null condition.

    style (B, P, d_s); content, rhythm, emotion (B, F, d) at motion frame rate.
    ``keep`` optionally maps a stream name to a (B,) boolean mask, where False
    replaces that sample's stream with the null embedding.
    """

    style: np.ndarray | None = None
    content: np.ndarray | None = None
    rhythm: np.ndarray | None = None
    emotion: np.ndarray | None = None
    keep: dict = field(default_factory=dict)

    def with_only(self, *names: str) -> "Conditions":
        return Conditions(**{n: (getattr(self, n) if n in names else None)
                             for n in ("style", "content", "rhythm", "emotion")})

    def take(self, idx) -> "Conditions":
        pick = lambda a: None if a is None else a[idx]
        return Conditions(pick(self.style), pick(self.content), pick(self.rhythm), pick(self.emotion),
                          {k: v[idx] for k, v in self.keep.items()})

    def digest(self) -> dict:
        out = {}
        for n in ("style", "content", "rhythm", "emotion"):
            a = getattr(self, n)
            out[n] = None if a is None else hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()
        return out


@dataclass
class GuidanceWeights:
    w_c: float = 1.0
    w_s: float = 2.0
    w_re: float = 1.0
    w_r: float | None = None  # only used when rhythm and emotion are guided separately
    w_e: float | None = None

    def __post_init__(self):
        vals = [self.w_c, self.w_s, self.w_re] + [w for w in (self.w_r, self.w_e) if w is not None]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("guidance weights must be finite")


# denoiser ----------------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    part_dims: tuple[int, ...] = (16, 16, 16)
    n_tokens: int = 32
    downscale: int = 4
    d_model: int = 48
    n_heads: int = 6
    n_groups: int = 2
    ff_mult: int = 2
    d_style: int = 64
    d_content: int = 32
    d_rhythm: int = 8
    d_emotion: int = 8
    n_steps: int = 200
    schedule: str = "cosine"
    infer_steps: int = 50
    p_drop: float = 0.1
    split_re: bool = False
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.part_dims = tuple(int(d) for d in self.part_dims)
        n = len(self.part_dims)
        if self.d_model % n or self.n_heads % n:
            raise ValueError("d_model and n_heads must be divisible by the number of parts")
        if (self.d_model // n) % (self.n_heads // n):
            raise ValueError("per-part width must be divisible by the per-part head count")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @property
    def n_parts(self) -> int:
        return len(self.part_dims)

    @property
    def part_width(self) -> int:
        return self.d_model // self.n_parts

    @property
    def n_frames(self) -> int:
        return self.n_tokens * self.downscale


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class PartLinear(Module):
    """Independent affine map per part on (B, parts, m, n_in) inputs."""

    def __init__(self, n_parts: int, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        self.weight = _param(rng.normal(0, scale / np.sqrt(n_in), size=(n_parts, n_in, n_out)))
        self.bias = _param(np.zeros((n_parts, 1, n_out)))

    def __call__(self, x) -> Tensor:
        return nx.matmul(x, self.weight) + self.bias


class PartLayerNorm(Module):
    def __init__(self, n_parts: int, width: int):
        self.gain = _param(np.ones((n_parts, 1, width)))
        self.shift = _param(np.zeros((n_parts, 1, width)))

    def __call__(self, x) -> Tensor:
        return nx.layer_norm(x) * self.gain + self.shift


def _heads(x: Tensor, h: int) -> Tensor:
    b, p, m, w = x.shape
    return x.reshape(b, p, m, h, w // h).transpose(0, 1, 3, 2, 4)


def _unheads(x: Tensor) -> Tensor:
    b, p, h, m, dh = x.shape
    return x.transpose(0, 1, 3, 2, 4).reshape(b, p, m, h * dh)


def fuse_parts(x: Tensor) -> Tensor:
    """(B, parts, n, P) -> (B, n, parts * P)."""
    b, p, n, w = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, p * w)


def unfuse_parts(x: Tensor, n_parts: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_parts, d // n_parts).transpose(0, 2, 1, 3)


class PartAttentionBlock(Module):
    """f' = Norm(f + FC(concat_i Att_i(f_i))).

    Self mode: Att_i attends within part i's tokens. Cross mode: queries from
    part i, keys and values from the condition stream through part-i weights.
    Query positions are added to the query input; key positions are added to
    the projected condition stream, so they reach both keys and values. In
    cross mode a learned per-head slope times ``distance`` (query-to-frame
    distance in tokens) is subtracted from the scores, so each token can
    focus on the frames it covers.
    """

    def __init__(self, n_parts: int, width: int, heads_per_part: int, rng: np.random.Generator,
                 context_dim: int | None = None):
        self.n_parts, self.width, self.heads = n_parts, width, heads_per_part
        self.cross = context_dim is not None
        if self.cross:
            self.ctx_in = PartLinear(n_parts, context_dim, width, rng)
            self.locality = _param(np.full((n_parts, heads_per_part, 1, 1), LOCALITY_INIT))
        self.q = PartLinear(n_parts, width, width, rng)
        self.k = PartLinear(n_parts, width, width, rng)
        self.v = PartLinear(n_parts, width, width, rng)
        self.fc = Linear(n_parts * width, n_parts * width, rng, scale=0.5)
        self.norm = PartLayerNorm(n_parts, width)

    def attend(self, f: Tensor, context: Tensor | None = None, q_pos: np.ndarray | None = None,
               k_pos: np.ndarray | None = None, distance: np.ndarray | None = None) -> Tensor:
        """Per-part attention outputs before fusion, (B, parts, n, P)."""
        q_in = f if q_pos is None else f + q_pos
        if self.cross:
            if context is None:
                raise ValueError("cross-attention block needs a condition stream")
            ctx = nx.as_tensor(context)
            kv = self.ctx_in(ctx.reshape(ctx.shape[0], 1, ctx.shape[1], ctx.shape[2]))
        else:
            kv = f
        if k_pos is not None:
            kv = kv + k_pos
        q = _heads(self.q(q_in), self.heads)
        k = _heads(self.k(kv), self.heads)
        v = _heads(self.v(kv), self.heads)
        scores = nx.matmul(q, k.T) * (1.0 / np.sqrt(q.shape[-1]))
        if distance is not None and self.cross:
            scores = scores - self.locality * distance
        return _unheads(nx.matmul(nx.softmax(scores, axis=-1), v))

    def __call__(self, f: Tensor, context=None, q_pos=None, k_pos=None, distance=None) -> tuple[Tensor, Tensor]:
        pre = self.attend(f, context, q_pos, k_pos, distance)
        fused = unfuse_parts(self.fc(fuse_parts(pre)), self.n_parts)
        return self.norm(f + fused), pre


class PartFeedForward(Module):
    def __init__(self, n_parts: int, width: int, mult: int, rng: np.random.Generator):
        self.fc1 = PartLinear(n_parts, width, mult * width, rng)
        self.fc2 = PartLinear(n_parts, mult * width, width, rng, scale=0.5)
        self.norm = PartLayerNorm(n_parts, width)

    def __call__(self, f: Tensor) -> Tensor:
        return self.norm(f + self.fc2(nx.gelu(self.fc1(f))))


def fuse_style_content(z_parts: Sequence, style: Sequence, content) -> list[Tensor]:
    """z'_i = concat(z_i + s_i, a_c): s_i added to every token, content appended on the feature axis.

    z_parts[i] is (B, n, P), style[i] is (B, P), content is (B, n, d_c).
    """
    content = nx.as_tensor(content)
    out = []
    for z, s in zip(z_parts, style):
        z, s = nx.as_tensor(z), nx.as_tensor(s)
        if z.shape[:2] != content.shape[:2]:
            raise ValueError(f"content {content.shape[:2]} not aligned with tokens {z.shape[:2]}")
        out.append(nx.concat([z + s.reshape(s.shape[0], 1, s.shape[1]), content], axis=-1))
    return out


def pool_frames(x: np.ndarray, factor: int) -> np.ndarray:
    """Average (B, F, d) frames into (B, F / factor, d) tokens."""
    b, f, d = x.shape
    if f % factor:
        raise ValueError(f"{f} frames not divisible by {factor}")
    return x.reshape(b, f // factor, factor, d).mean(axis=2)


class LayerGroup(Module):
    """Part self-attention, per-part feed-forward, rhythm then emotion cross-attention."""

    def __init__(self, c: DiffusionConfig, rng: np.random.Generator):
        p, w, hp = c.n_parts, c.part_width, c.n_heads // c.n_parts
        self.self_attn = PartAttentionBlock(p, w, hp, rng)
        self.ff = PartFeedForward(p, w, c.ff_mult, rng)
        self.rhythm_attn = PartAttentionBlock(p, w, hp, rng, context_dim=c.d_rhythm)
        self.emotion_attn = PartAttentionBlock(p, w, hp, rng, context_dim=c.d_emotion)


class Denoiser(Module):
    """x0-predicting denoiser D(z_t, t, s, a_c, a_r, a_e)."""

    def __init__(self, config: DiffusionConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        c = config
        self.config = c
        p, w, hp = c.n_parts, c.part_width, c.n_heads // c.n_parts
        self.in_proj = [Linear(d, w, rng) for d in c.part_dims]
        self.style_proj = PartLinear(p, c.d_style, w, rng)
        self.fuse_proj = PartLinear(p, w + c.d_content, w, rng)
        self.time1 = Linear(c.d_model, c.d_model, rng)
        self.time2 = Linear(c.d_model, c.d_model, rng, scale=0.5)
        self.groups = []
        for _ in range(c.n_groups):
            self.groups.append(LayerGroup(c, rng))
        self.out_proj = [Linear(w, d, rng) for d in c.part_dims]
        self.null_style = _param(rng.normal(0, 0.1, size=(p, c.d_style)))
        self.null_content = _param(rng.normal(0, 0.1, size=(c.d_content,)))
        self.null_rhythm = _param(rng.normal(0, 0.1, size=(c.d_rhythm,)))
        self.null_emotion = _param(rng.normal(0, 0.1, size=(c.d_emotion,)))
        frames = c.n_frames
        self.token_pos = sinusoidal_embedding(np.arange(c.n_tokens) * c.downscale + (c.downscale - 1) / 2, w,
                                              max_period=1000.0)
        self.frame_pos = sinusoidal_embedding(np.arange(frames, dtype=np.float64), w, max_period=1000.0)
        centres = np.arange(c.n_tokens) * c.downscale + (c.downscale - 1) / 2
        self.frame_dist = np.abs(centres[:, None] - np.arange(frames)[None, :]) / c.downscale

    # helpers -----------------------------------------------------------------------
    def _stream(self, value, null: Tensor, keep, batch: int, shape: tuple) -> Tensor:
        """Condition tensor with null substitution, broadcast to ``shape``."""
        null_b = nx.reshape(null, (1,) * (len(shape) - null.ndim) + null.shape) * np.ones(shape)
        if value is None:
            return null_b
        value = np.asarray(value, dtype=np.float64)
        if value.shape != shape:
            raise ValueError(f"condition shape {value.shape} != expected {shape}")
        if keep is None:
            return Tensor(value)
        m = np.asarray(keep, dtype=np.float64).reshape((batch,) + (1,) * (len(shape) - 1))
        return null_b * (1.0 - m) + value * m

    def split_latent(self, z) -> list[Tensor]:
        z = nx.as_tensor(z)
        if z.ndim != 3 or z.shape[1] != self.config.n_tokens or z.shape[2] != sum(self.config.part_dims):
            raise ValueError(f"latent shape {z.shape} does not match the denoiser")
        return nx.split(z, list(self.config.part_dims), axis=-1)

    def embed(self, z_t, t, cond: Conditions) -> Tensor:
        """Token streams after style/content fusion and time embedding, (B, parts, n, P)."""
        c = self.config
        parts = self.split_latent(z_t)
        b = parts[0].shape[0]
        keep = cond.keep
        style = self._stream(cond.style, self.null_style, keep.get("style"), b, (b, c.n_parts, c.d_style))
        content_f = self._stream(cond.content, self.null_content, keep.get("content"), b,
                                 (b, c.n_frames, c.d_content))
        content = nx.mean(content_f.reshape(b, c.n_tokens, c.downscale, c.d_content), axis=2)
        tokens = [proj(zp) for proj, zp in zip(self.in_proj, parts)]
        s_proj = self.style_proj(style.reshape(b, c.n_parts, 1, c.d_style))  # (B, parts, 1, P)
        s_list = [s_proj[:, i, 0] for i in range(c.n_parts)]
        fused = fuse_style_content(tokens, s_list, content)
        f = self.fuse_proj(nx.stack(fused, axis=1))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        temb = self.time2(nx.gelu(self.time1(Tensor(sinusoidal_embedding(t, c.d_model)))))
        f = f + temb.reshape(b, c.n_parts, 1, c.part_width) + self.token_pos
        return f

    def forward(self, z_t, t, cond: Conditions, return_pre: bool = False):
        c = self.config
        b = np.shape(z_t)[0] if not isinstance(z_t, Tensor) else z_t.shape[0]
        keep = cond.keep
        rhythm = self._stream(cond.rhythm, self.null_rhythm, keep.get("rhythm"), b, (b, c.n_frames, c.d_rhythm))
        emotion = self._stream(cond.emotion, self.null_emotion, keep.get("emotion"), b,
                               (b, c.n_frames, c.d_emotion))
        f = self.embed(z_t, t, cond)
        pres = []
        for g in self.groups:
            f, pre = g.self_attn(f)
            pres.append(pre)
            f = g.ff(f)
            f, _ = g.rhythm_attn(f, rhythm, self.token_pos, self.frame_pos, self.frame_dist)
            f, _ = g.emotion_attn(f, emotion, self.token_pos, self.frame_pos, self.frame_dist)
        out = nx.concat([proj(f[:, i]) for i, proj in enumerate(self.out_proj)], axis=-1)
        return (out, pres) if return_pre else out

    __call__ = forward

    # persistence -------------------------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None, extra_tensors: dict | None = None) -> None:
        named = {f"param.{k}": v for k, v in self.state_dict().items()}
        named.update(extra_tensors or {})
        header = {"kind": "diffusion", "config": asdict(self.config), "extra": extra or {}}
        save_named(path, header, named)

    @classmethod
    def load(cls, path: str | Path) -> tuple["Denoiser", dict, dict]:
        header, named = load_named(path)
        if header.get("kind") != "diffusion":
            raise FormatError(f"{path}: not a diffusion checkpoint")
        model = cls(DiffusionConfig(**header["config"]))
        model.load_state_dict({k[6:]: v for k, v in named.items() if k.startswith("param.")})
        rest = {k: v for k, v in named.items() if not k.startswith("param.")}
        return model, header.get("extra", {}), rest


def denoise(z_t, t, cond: Conditions, model: Denoiser) -> np.ndarray:
    return model(np.asarray(z_t, dtype=np.float64), t, cond).data


# training ----------------------------------------------------------------------------

def training_loss(model: Denoiser, z0: np.ndarray, cond: Conditions, schedule: NoiseSchedule,
                  rng: np.random.Generator, p_drop: float | None = None) -> tuple[Tensor, dict]:
    """Smooth-L1 between z0 and the prediction from a random-t noisy draw.

    Each condition group (style, content, rhythm+emotion) is dropped to its
    null embedding for the whole step with probability ``p_drop``.
    """
    p_drop = model.config.p_drop if p_drop is None else p_drop
    b = z0.shape[0]
    t = rng.integers(1, schedule.n_steps + 1, size=b)
    eps = rng.normal(size=z0.shape)
    z_t = q_sample(z0, t, eps, schedule)
    dropped = {g: bool(rng.random() < p_drop) for g in GROUPS}
    c = Conditions(None if dropped["style"] else cond.style,
                   None if dropped["content"] else cond.content,
                   None if dropped["rhythm_emotion"] else cond.rhythm,
                   None if dropped["rhythm_emotion"] else cond.emotion)
    pred = model(z_t, t, c)
    return nx.smooth_l1(pred, Tensor(z0)), {"dropped": dropped, "t": t}


def learning_rate(config: DiffusionConfig, step: int, total: int) -> float:
    """Cosine decay from ``lr`` to 5% of it over ``total`` steps, or constant."""
    if config.lr_schedule == "constant":
        return config.lr
    frac = min(step / max(total, 1), 1.0)
    return config.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))


def train_diffusion(latents: np.ndarray, cond: Conditions, config: DiffusionConfig,
                    model: Denoiser | None = None, optimizer_state: dict | None = None,
                    start_step: int = 0, rng_state: dict | None = None,
                    style_pool: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
                    on_step: Callable[[int, dict], None] | None = None,
                    total_steps: int | None = None) -> tuple[Denoiser, TrainLog, Adam, np.random.Generator]:
    """Fit the denoiser on normalised latents (N, n, sum d_i) with per-clip conditions.

    ``style_pool(idx, rng)`` may supply the style vectors for a batch instead
    of ``cond.style[idx]``. ``total_steps`` is the length the learning-rate
    schedule spans (default ``config.steps``); a run stopped early and resumed
    later passes the full length so both halves follow one schedule.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    schedule = make_schedule(config.n_steps, config.schedule)
    model = model or Denoiser(config, np.random.default_rng(config.seed + 1))
    opt = Adam(model.named_parameters(), lr=config.lr, clip_norm=1.0)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    log = TrainLog()
    n = len(latents)
    span = total_steps or config.steps
    for step in range(start_step, config.steps):
        t0 = time.perf_counter()
        opt.lr = learning_rate(config, step, span)
        idx = rng.choice(n, min(config.batch_size, n), replace=False)
        bc = cond.take(idx)
        if style_pool is not None:
            bc.style = style_pool(idx, rng)
        with Tape() as tape:
            loss, info = training_loss(model, latents[idx], bc, schedule, rng)
        gnorm = opt.step(tape.backward(loss))
        row = {"step": step, "loss": loss.item(), "grad_norm": gnorm,
               "dropped": [g for g, d in info["dropped"].items() if d], "sec": time.perf_counter() - t0}
        log.append(**row)
        if on_step is not None:
            on_step(step, row)
    return model, log, opt, rng


# guidance and sampling ---------------------------------------------------------------

def cfg_denoise(model: Denoiser, z_t, t, cond: Conditions, weights: GuidanceWeights,
                split_re: bool | None = None) -> np.ndarray:
    """Incremental guidance from separate denoiser evaluations:

    D(0) + w_c (D(c) - D(0)) + w_s (D(c,s) - D(c)) + w_re (D(c,r,e) - D(c)).
    With ``split_re`` the last term becomes w_r (D(c,r) - D(c)) + w_e (D(c,e) - D(c)).
    """
    split_re = model.config.split_re if split_re is None else split_re
    uncond = denoise(z_t, t, Conditions(), model)
    content = denoise(z_t, t, cond.with_only("content"), model)
    style = denoise(z_t, t, cond.with_only("content", "style"), model)
    out = uncond + weights.w_c * (content - uncond) + weights.w_s * (style - content)
    if split_re:
        w_r = weights.w_re if weights.w_r is None else weights.w_r
        w_e = weights.w_re if weights.w_e is None else weights.w_e
        rhythm = denoise(z_t, t, cond.with_only("content", "rhythm"), model)
        emotion = denoise(z_t, t, cond.with_only("content", "emotion"), model)
        return out + w_r * (rhythm - content) + w_e * (emotion - content)
    re = denoise(z_t, t, cond.with_only("content", "rhythm", "emotion"), model)
    return out + weights.w_re * (re - content)


def sampling_timesteps(total: int, n_steps: int) -> list[int]:
    if n_steps < 1 or n_steps > total:
        raise ValueError(f"n_steps must lie in [1, {total}]")
    ts = np.unique(np.round(np.linspace(1, total, n_steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def sample_latent(model: Denoiser, schedule: NoiseSchedule, cond: Conditions, weights: GuidanceWeights,
                  n_steps: int, seed: int, batch: int | None = None) -> np.ndarray:
    """Ancestral sampling on a strided step subset using the x0-implied posterior."""
    c = model.config
    if batch is None:
        present = [a for a in (cond.style, cond.content, cond.rhythm, cond.emotion) if a is not None]
        batch = present[0].shape[0] if present else 1
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(batch, c.n_tokens, sum(c.part_dims)))
    ts = sampling_timesteps(schedule.n_steps, n_steps)
    for k, t in enumerate(ts):
        x0 = cfg_denoise(model, z, np.full(batch, t), cond, weights)
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        if t_prev == 0:
            z = x0
            break
        ab_t, ab_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
        a = ab_t / ab_p
        mean = (np.sqrt(ab_p) * (1 - a) / (1 - ab_t)) * x0 + (np.sqrt(a) * (1 - ab_p) / (1 - ab_t)) * z
        var = (1 - ab_p) / (1 - ab_t) * (1 - a)
        z = mean + np.sqrt(var) * rng.normal(size=z.shape)
    return z


def sample(model: Denoiser, schedule: NoiseSchedule, cond: Conditions, weights: GuidanceWeights,
           n_steps: int, seed: int, latent_to_motion: Callable[[np.ndarray], np.ndarray] | None = None,
           batch: int | None = None) -> np.ndarray:
    """Sample latents and, given a codec callback, decode them to motion frames."""
    z = sample_latent(model, schedule, cond, weights, n_steps, seed, batch)
    return z if latent_to_motion is None else latent_to_motion(z)


def sampling_manifest(seed: int, weights: GuidanceWeights, schedule: NoiseSchedule, n_steps: int,
                      cond: Conditions, extra: dict | None = None) -> dict:
    return {"seed": int(seed), "weights": asdict(weights), "schedule": schedule.to_json(),
            "n_steps": int(n_steps), "conditions": cond.digest(), **(extra or {})}


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
