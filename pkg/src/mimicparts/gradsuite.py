"""Finite-difference gradient checks for every trainable module, on tiny instances."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .body import make_part_layout, split_clip
from .diffusion import Conditions, Denoiser, DiffusionConfig, make_schedule, training_loss
from .numerics import Tensor, grad_check_params
from .numerics.nn import Conv1d, LayerNorm, Linear, MultiHeadAttention, TransformerEncoderLayer
from .rvq import RvqConfig, RvqModel
from .style import StyleConfig, StyleEncoderModel, nt_xent

MAX_PARAMS = 1000


@dataclass
class SuiteResult:
    name: str
    n_params: int
    max_rel_err: float
    n_checked: int
    seconds: float
    rtol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rtol and self.n_params <= MAX_PARAMS

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<18} params={self.n_params:<4} checked={self.n_checked:<4} "
                f"max_rel_err={self.max_rel_err:.2e} ({self.seconds:.1f}s)")


def _case_layers(rng):
    lin, norm = Linear(5, 4, rng), LayerNorm(4)
    conv = Conv1d(4, 3, 3, rng, stride=2, padding=1)
    x = Tensor(rng.normal(size=(2, 8, 5)))
    y = Tensor(rng.normal(size=(2, 4, 3)))
    params = lin.parameters() + norm.parameters() + conv.parameters()
    return lambda: nx.smooth_l1(conv(nx.gelu(norm(lin(x)))), y), params


def _case_attention(rng):
    attn = MultiHeadAttention(4, 2, rng, context_dim=3)
    x, ctx = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 3)))
    return lambda: nx.mean(attn(x, ctx) ** 2), attn.parameters()


def _case_transformer(rng):
    layer = TransformerEncoderLayer(4, 2, rng, ff_mult=2)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    return lambda: nx.mean(nx.sin(layer(x))), layer.parameters()


def _case_rvq(rng):
    model = RvqModel(RvqConfig(in_channels=3, hidden=3, latent_dim=4, n_layers=3, codebook_size=5,
                               quantizer_dropout=0.0), rng)
    x = rng.normal(size=(2, 8, 3))
    model.init_codebooks(model.encode(x), rng)
    r1 = model.encode(x)
    res = model.quantize(r1)
    frozen = (res, res.quantized - r1)
    return lambda: model.loss(x, rng, train=False, frozen=frozen)[0], model.parameters()


def _case_nt_xent(rng):
    e = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    return lambda: nt_xent(e, [0, 1, 2, 0, 1, 2], 0.2), [e]


def _case_style(mode: str):
    def build(rng):
        cfg = StyleConfig(part_channels=(2, 2, 1), d_style=4, n_layers=1, n_heads=2, half_frames=3, patch=1, mode=mode,
                          tau=0.5)
        model = StyleEncoderModel(cfg, rng)
        lay = make_part_layout(cfg.part_channels)
        x = rng.normal(size=(3, 6, 5))
        return lambda: model.loss(split_clip(x, lay)), model.parameters()
    return build


def _case_denoiser(rng):
    cfg = DiffusionConfig(part_dims=(2, 2, 2), n_tokens=2, downscale=2, d_model=6, n_heads=3, n_groups=1,
                          ff_mult=1, d_style=2, d_content=2, d_rhythm=2, d_emotion=2, n_steps=10)
    model = Denoiser(cfg, rng)
    f = cfg.n_frames
    cond = Conditions(rng.normal(size=(2, 3, 2)), rng.normal(size=(2, f, 2)), rng.normal(size=(2, f, 2)),
                      rng.normal(size=(2, f, 2)))
    z0 = rng.normal(size=(2, cfg.n_tokens, 6))
    sched = make_schedule(cfg.n_steps)
    return (lambda: training_loss(model, z0, cond, sched, np.random.default_rng(9), p_drop=0.0)[0],
            model.parameters())


def _case_classifier(rng):
    w = Tensor(rng.normal(0, 0.1, size=(6, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    x = rng.normal(size=(5, 6))
    onehot = np.eye(4)[rng.integers(4, size=5)]

    def loss():
        logp = nx.log_softmax(nx.matmul(Tensor(x), w) + b, axis=-1)
        return -nx.mean(nx.tsum(logp * onehot, axis=-1)) + 1e-3 * nx.tsum(w * w)
    return loss, [w, b]


CASES: dict[str, Callable] = {
    "linear_norm_conv": _case_layers,
    "attention": _case_attention,
    "transformer_layer": _case_transformer,
    "rvq_codec": _case_rvq,
    "nt_xent": _case_nt_xent,
    "style_part": _case_style("part"),
    "style_global": _case_style("global"),
    "denoiser": _case_denoiser,
    "style_classifier": _case_classifier,
}


def run_suite(h: float = 1e-5, rtol: float = 1e-4, seed: int = 0,
              names: list[str] | None = None) -> list[SuiteResult]:
    out = []
    for name in names or list(CASES):
        if name not in CASES:
            raise KeyError(f"unknown gradient case {name!r}")
        t0 = time.perf_counter()
        loss_fn, params = CASES[name](np.random.default_rng(seed))
        n_params = int(sum(p.size for p in params))
        rep = grad_check_params(loss_fn, params, h=h, rtol=rtol)
        out.append(SuiteResult(name, n_params, rep.max_rel_err, rep.n_checked, time.perf_counter() - t0, rtol))
    return out


__all__ = ["CASES", "MAX_PARAMS", "SuiteResult", "run_suite"]
