"""Flat dotted-key run configuration with named presets."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

ABLATIONS = ("no_part_style", "no_rhythm", "no_emotion", "no_rhythm_emotion")

# Every key with its default (the "toy" preset). Values are JSON scalars or lists.
DEFAULTS: dict = {
    "seed": 0,
    "data.n_styles": 4,
    "data.clips_per_style": 200,
    "data.frames": 128,
    "data.fps": 30.0,
    "data.channels": [24, 18, 10],
    "data.dims": [32, 8, 8],
    "data.split": [0.85, 0.075, 0.075],
    "rvq.hidden": 64,
    "rvq.latent_dim": 16,
    "rvq.layers": 6,
    "rvq.codebook_size": 64,
    "rvq.beta": 0.25,
    "rvq.quantizer_dropout": 0.2,
    "rvq.conv_dropout": 0.0,
    "rvq.ema_decay": 0.99,
    "rvq.lr": 1e-3,
    "rvq.batch_size": 16,
    "rvq.steps": 300,
    "style.d_style": 64,
    "style.layers": 2,
    "style.heads": 2,
    "style.tau": 0.1,
    "style.half_frames": 64,
    "style.patch": 4,
    "style.lr": 1e-3,
    "style.batch_size": 32,
    "style.steps": 300,
    "diffusion.d_model": 48,
    "diffusion.heads": 6,
    "diffusion.groups": 2,
    "diffusion.n_steps": 200,
    "diffusion.schedule": "cosine",
    "diffusion.infer_steps": 50,
    "diffusion.p_drop": 0.1,
    "diffusion.split_re": False,
    "diffusion.lr": 1e-3,
    "diffusion.lr_schedule": "cosine",
    "diffusion.batch_size": 32,
    "diffusion.steps": 3000,
    "guidance.w_c": 1.0,
    "guidance.w_s": 2.0,
    "guidance.w_re": 1.0,
    "eval.sigma": 0.1,
    "eval.n_generate": 64,
    "eval.classifier_steps": 400,
    "ablation.no_part_style": False,
    "ablation.no_rhythm": False,
    "ablation.no_emotion": False,
    "ablation.no_rhythm_emotion": False,
}

PRESETS: dict[str, dict] = {
    "toy": {},
    "smoke": {
        "data.clips_per_style": 12,
        "data.frames": 64,
        "rvq.hidden": 16,
        "rvq.layers": 3,
        "rvq.codebook_size": 16,
        "rvq.steps": 20,
        "rvq.batch_size": 8,
        "style.d_style": 16,
        "style.layers": 1,
        "style.half_frames": 32,
        "style.steps": 20,
        "style.batch_size": 8,
        "diffusion.d_model": 24,
        "diffusion.groups": 1,
        "diffusion.n_steps": 50,
        "diffusion.infer_steps": 5,
        "diffusion.steps": 20,
        "diffusion.batch_size": 8,
        "eval.n_generate": 8,
        "eval.classifier_steps": 100,
    },
    "desk": {
        "rvq.hidden": 128,
        "rvq.steps": 1500,
        "rvq.batch_size": 32,
        "rvq.lr": 2e-4,
        "style.steps": 2000,
        "diffusion.steps": 4000,
    },
}


class ConfigError(ValueError):
    pass


def make_config(preset: str = "toy", overrides: dict | None = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(PRESETS[preset]))
    return apply_overrides(cfg, overrides or {})


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    out = dict(cfg)
    for key, value in overrides.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be true/false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number")
            value = type(default)(value) if isinstance(default, float) else value
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"{key} must be an integer")
            value = int(value) if isinstance(default, int) else value
        elif isinstance(default, list):
            if not isinstance(value, list) or len(value) != len(default):
                raise ConfigError(f"{key} must be a list of {len(default)} numbers")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        out[key] = value
    validate(out)
    return out


def validate(cfg: dict) -> None:
    if cfg["data.clips_per_style"] < 1 or cfg["data.n_styles"] < 1:
        raise ConfigError("the dataset needs at least one clip per style")
    if cfg["data.frames"] % 4:
        raise ConfigError("data.frames must be divisible by 4")
    if cfg["data.frames"] < 2 * cfg["style.half_frames"]:
        raise ConfigError("clips are shorter than the style window (2 * style.half_frames)")
    if cfg["style.half_frames"] % cfg["style.patch"]:
        raise ConfigError("style.patch must divide style.half_frames")
    for key in ("rvq.steps", "style.steps", "diffusion.steps", "eval.n_generate"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be positive")
    if cfg["diffusion.infer_steps"] > cfg["diffusion.n_steps"]:
        raise ConfigError("diffusion.infer_steps exceeds diffusion.n_steps")
    if cfg["diffusion.schedule"] not in ("cosine", "linear"):
        raise ConfigError("diffusion.schedule must be cosine or linear")
    if cfg["diffusion.lr_schedule"] not in ("cosine", "constant"):
        raise ConfigError("diffusion.lr_schedule must be cosine or constant")
    if any(c < 1 for c in cfg["data.channels"]):
        raise ConfigError("every part needs at least one channel")


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: dict | None = None) -> dict:
    """Preset, then JSON file values, then explicit overrides, then MIMICPARTS_SEED.

    An explicit ``preset`` wins over a ``"preset"`` key in the file; the fallback is "toy".
    """
    extra: dict = {}
    if path is not None:
        try:
            extra = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(extra, dict):
            raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        file_preset = extra.pop("preset", None)
        preset = preset or file_preset
    extra.update(overrides or {})
    env_seed = os.environ.get("MIMICPARTS_SEED")
    if env_seed is not None:
        try:
            extra["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError("MIMICPARTS_SEED must be an integer") from exc
    return make_config(preset or "toy", extra)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def section_hash(cfg: dict, *prefixes: str) -> str:
    """Hash of the keys a stage depends on (plus the seed)."""
    sub = {k: v for k, v in cfg.items() if k == "seed" or k.startswith(prefixes)}
    return config_hash(sub)
