"""Run-directory driver: synthesis, staged training, generation, evaluation and ablations.

Layout of a run directory::

    data/          clips, speech features, manifest.json
    checkpoints/   rvq_<part>.mpc, style_<mode>.mpc, diffusion_<variant>.mpc, classifier.mpc
    logs/          <stage>.jsonl loss logs plus <stage>_loss.csv/.svg curves
    generated/     <name>/clips/*.mpc and <name>/manifest.json
    reports/       metric reports (JSON + CSV)
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .body import MotionClip, load_clip, merge_parts, save_clip, split_clip
from .config import ABLATIONS, apply_overrides, config_hash, section_hash
from .data import Dataset, load_dataset, make_dataset, save_dataset
from .diffusion import (
    Conditions,
    Denoiser,
    DiffusionConfig,
    GuidanceWeights,
    make_schedule,
    sample_latent,
    sampling_manifest,
    train_diffusion,
)
from .metrics import (
    FeatureDist,
    StyleClassifier,
    beat_consistency,
    diversity,
    fgd,
    write_report,
)
from .numerics.nn import Adam
from .numerics.serialize import FormatError, load_named, save_named
from .plots import write_plot
from .rvq import RvqConfig, RvqModel, TrainLog, reconstruction_l1, smoothed, train_rvq
from .style import StyleConfig, StyleEncoderModel, encode_style, train_style

STAGES = ("rvq", "style", "diffusion")
METRICS = ("fgd", "bc", "diversity", "sra")
SAMPLE_CHUNK = 32


class PipelineError(Exception):
    """Base class for driver errors."""


class MissingPrerequisite(PipelineError):
    """An earlier stage's artifact is absent."""


class ValidationError(PipelineError):
    """Bad user input (names, counts, weights)."""


# paths and variants ---------------------------------------------------------------------

@dataclass(frozen=True)
class RunPaths:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    data = property(lambda self: self.root / "data")
    checkpoints = property(lambda self: self.root / "checkpoints")
    logs = property(lambda self: self.root / "logs")
    generated = property(lambda self: self.root / "generated")
    reports = property(lambda self: self.root / "reports")

    def ensure(self) -> "RunPaths":
        for d in (self.data, self.checkpoints, self.logs, self.generated, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def rvq(self, part: str) -> Path:
        return self.checkpoints / f"rvq_{part}.mpc"

    def style(self, mode: str) -> Path:
        return self.checkpoints / f"style_{mode}.mpc"

    def diffusion(self, variant: str) -> Path:
        return self.checkpoints / f"diffusion_{variant}.mpc"

    @property
    def classifier(self) -> Path:
        return self.checkpoints / "classifier.mpc"


def variant_name(cfg: dict) -> str:
    flags = [a for a in ABLATIONS if cfg[f"ablation.{a}"]]
    return "+".join(flags) if flags else "full"


def style_mode(cfg: dict) -> str:
    return "global" if cfg["ablation.no_part_style"] else "part"


def uses_rhythm(cfg: dict) -> bool:
    return not (cfg["ablation.no_rhythm"] or cfg["ablation.no_rhythm_emotion"])


def uses_emotion(cfg: dict) -> bool:
    return not (cfg["ablation.no_emotion"] or cfg["ablation.no_rhythm_emotion"])


def with_ablation(cfg: dict, row: str) -> dict:
    if row != "full" and row not in ABLATIONS:
        raise ValidationError(f"unknown ablation row {row!r}; choose from {list(ABLATIONS)}")
    flags = {f"ablation.{a}": a == row for a in ABLATIONS}
    return apply_overrides(cfg, flags)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{what} not found at {path}")
    return path


# module configs from the flat run config ------------------------------------------------

def rvq_config(cfg: dict, part_index: int, in_channels: int) -> RvqConfig:
    return RvqConfig(in_channels=in_channels, hidden=cfg["rvq.hidden"], latent_dim=cfg["rvq.latent_dim"],
                     n_layers=cfg["rvq.layers"], codebook_size=cfg["rvq.codebook_size"],
                     quantizer_dropout=cfg["rvq.quantizer_dropout"], conv_dropout=cfg["rvq.conv_dropout"],
                     beta=cfg["rvq.beta"], ema_decay=cfg["rvq.ema_decay"], lr=cfg["rvq.lr"],
                     batch_size=cfg["rvq.batch_size"], steps=cfg["rvq.steps"], seed=cfg["seed"] + 100 + part_index)


def style_config(cfg: dict, mode: str) -> StyleConfig:
    return StyleConfig(part_channels=tuple(cfg["data.channels"]), d_style=cfg["style.d_style"],
                       n_layers=cfg["style.layers"], n_heads=cfg["style.heads"], tau=cfg["style.tau"],
                       half_frames=cfg["style.half_frames"], patch=cfg["style.patch"], mode=mode,
                       lr=cfg["style.lr"], batch_size=cfg["style.batch_size"], steps=cfg["style.steps"],
                       seed=cfg["seed"] + 200)


def diffusion_config(cfg: dict) -> DiffusionConfig:
    n_parts = len(cfg["data.channels"])
    d_c, d_r, d_e = cfg["data.dims"]
    return DiffusionConfig(part_dims=(cfg["rvq.latent_dim"],) * n_parts, n_tokens=cfg["data.frames"] // 4,
                           downscale=4, d_model=cfg["diffusion.d_model"], n_heads=cfg["diffusion.heads"],
                           n_groups=cfg["diffusion.groups"], d_style=cfg["style.d_style"], d_content=d_c,
                           d_rhythm=d_r, d_emotion=d_e, n_steps=cfg["diffusion.n_steps"],
                           schedule=cfg["diffusion.schedule"], infer_steps=cfg["diffusion.infer_steps"],
                           p_drop=cfg["diffusion.p_drop"], split_re=cfg["diffusion.split_re"],
                           lr=cfg["diffusion.lr"], lr_schedule=cfg["diffusion.lr_schedule"],
                           batch_size=cfg["diffusion.batch_size"],
                           steps=cfg["diffusion.steps"], seed=cfg["seed"] + 300)


def guidance_weights(cfg: dict) -> GuidanceWeights:
    return GuidanceWeights(cfg["guidance.w_c"], cfg["guidance.w_s"], cfg["guidance.w_re"])


# data -----------------------------------------------------------------------------------

def synth_data(cfg: dict, paths: RunPaths) -> dict:
    paths.ensure()
    ds = make_dataset(cfg["data.n_styles"], cfg["data.clips_per_style"], cfg["data.frames"],
                      tuple(cfg["data.channels"]), cfg["data.fps"], cfg["seed"], tuple(cfg["data.dims"]),
                      tuple(cfg["data.split"]))
    return save_dataset(paths.data, ds, {"config_hash": section_hash(cfg, "data.")})


def load_run_data(paths: RunPaths) -> Dataset:
    try:
        return load_dataset(paths.data)
    except FileNotFoundError as exc:
        raise MissingPrerequisite(str(exc)) from exc


# training state helpers -----------------------------------------------------------------

def _opt_tensors(opt: Adam) -> dict[str, np.ndarray]:
    return {f"opt.{k}": v for k, v in opt.state_dict().items()}


def _opt_state(rest: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[4:]: v for k, v in rest.items() if k.startswith("opt.")}


def _resume_point(path: Path, stage_hash: str, resume: bool) -> dict | None:
    """Checkpoint 'extra' to continue from, or None to start fresh."""
    if not resume or not path.exists():
        return None
    header, _ = load_named(path)
    extra = header.get("extra", {})
    if extra.get("stage_hash") != stage_hash:
        raise ValidationError(f"{path} was trained with a different configuration; cannot resume")
    return extra


def _write_log(paths: RunPaths, name: str, log: TrainLog, cfg_hash: str, append: bool) -> None:
    path = paths.logs / f"{name}.jsonl"
    with open(path, "a" if append else "w") as fh:
        for e in log.entries:
            fh.write(json.dumps({"stage": name, "config_hash": cfg_hash, **e}) + "\n")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if rows:
        steps = [r["step"] for r in rows]
        losses = np.array([r["loss"] for r in rows])
        window = max(1, len(losses) // 20)
        sm = np.concatenate([np.full(window - 1, np.nan), smoothed(losses, window)])
        write_plot(paths.logs / f"{name}_loss", steps, {"loss": losses, f"mean of {window}": sm}, f"{name} loss")


def _step_limit(total: int, stop_at: int | None) -> int:
    return total if stop_at is None else min(total, stop_at)


# stage: rvq -----------------------------------------------------------------------------

def train_rvq_stage(cfg: dict, paths: RunPaths, resume: bool = False, stop_at: int | None = None,
                    on_step: Callable[[str, int, dict], None] | None = None) -> dict[str, TrainLog]:
    ds = load_run_data(paths)
    paths.ensure()
    train = ds.motion[ds.index("train")]
    logs = {}
    for k, (name, part) in enumerate(zip(ds.layout.names, split_clip(train, ds.layout))):
        full = rvq_config(cfg, k, part.shape[-1])
        stage_hash = section_hash(cfg, "rvq.", "data.")
        ck = paths.rvq(name)
        state = _resume_point(ck, stage_hash, resume)
        model = opt_state = rng_state = None
        start = 0
        if state is not None:
            model, _, rest = RvqModel.load(ck)
            model.config = full
            opt_state, rng_state, start = _opt_state(rest), state["rng_state"], state["step"]
        run_cfg = dataclasses.replace(full, steps=_step_limit(full.steps, stop_at))
        cb = None if on_step is None else (lambda s, row, n=name: on_step(f"rvq_{n}", s, row))
        model, log, opt, rng = train_rvq(part, run_cfg, model, opt_state, start, rng_state, cb)
        model.config = full
        step = max(start, run_cfg.steps)
        model.save(ck, {"stage_hash": stage_hash, "config_hash": config_hash(cfg), "step": step,
                        "complete": step >= full.steps, "rng_state": rng.bit_generator.state, "part": name},
                   _opt_tensors(opt))
        _write_log(paths, f"rvq_{name}", log, config_hash(cfg), append=state is not None)
        logs[name] = log
    return logs


def load_codecs(paths: RunPaths, part_names: Sequence[str]) -> list[RvqModel]:
    return [RvqModel.load(_require(paths.rvq(n), f"rvq checkpoint for part {n!r}"))[0] for n in part_names]


class PartCodec:
    """Per-part RVQ codecs with latent normalisation, bridging motion and diffusion latents."""

    def __init__(self, models: Sequence[RvqModel], layout, mean: np.ndarray | None = None,
                 std: np.ndarray | None = None):
        self.models, self.layout = list(models), layout
        self.mean, self.std = mean, std

    @property
    def part_dims(self) -> tuple[int, ...]:
        return tuple(m.config.latent_dim for m in self.models)

    def quantized_latents(self, motion: np.ndarray, batch: int = 64) -> np.ndarray:
        out = []
        for s in range(0, len(motion), batch):
            parts = split_clip(motion[s:s + batch], self.layout)
            out.append(np.concatenate([m.quantize(m.encode(p)).quantized for m, p in zip(self.models, parts)], -1))
        return np.concatenate(out)

    def fit_normaliser(self, latents: np.ndarray) -> None:
        flat = latents.reshape(-1, latents.shape[-1])
        self.mean, self.std = flat.mean(axis=0), flat.std(axis=0) + 1e-6

    def normalise(self, latents: np.ndarray) -> np.ndarray:
        return (latents - self.mean) / self.std

    def to_motion(self, z: np.ndarray) -> np.ndarray:
        """Normalised latents (B, n, sum d) -> motion (B, T, C), re-quantising each part."""
        lat = z * self.std + self.mean
        splits = np.cumsum(self.part_dims)[:-1]
        parts = [m.decode(m.quantize(p).quantized) for m, p in zip(self.models, np.split(lat, splits, axis=-1))]
        return merge_parts(parts, self.layout)


# stage: style ---------------------------------------------------------------------------

def train_style_stage(cfg: dict, paths: RunPaths, mode: str | None = None, resume: bool = False,
                      stop_at: int | None = None,
                      on_step: Callable[[str, int, dict], None] | None = None) -> TrainLog:
    mode = mode or style_mode(cfg)
    ds = load_run_data(paths)
    paths.ensure()
    full = style_config(cfg, mode)
    stage_hash = section_hash(cfg, "style.", "data.") + f":{mode}"
    ck = paths.style(mode)
    state = _resume_point(ck, stage_hash, resume)
    model = opt_state = rng_state = None
    start = 0
    if state is not None:
        model, _, rest = StyleEncoderModel.load(ck)
        model.config = full
        opt_state, rng_state, start = _opt_state(rest), state["rng_state"], state["step"]
    run_cfg = dataclasses.replace(full, steps=_step_limit(full.steps, stop_at))
    cb = None if on_step is None else (lambda s, row: on_step(f"style_{mode}", s, row))
    model, log, opt, rng = train_style(ds.motion[ds.index("train")], ds.layout, run_cfg, model, opt_state,
                                       start, rng_state, cb)
    model.config = full
    step = max(start, run_cfg.steps)
    model.save(ck, {"stage_hash": stage_hash, "config_hash": config_hash(cfg), "step": step,
                    "complete": step >= full.steps, "rng_state": rng.bit_generator.state}, _opt_tensors(opt))
    _write_log(paths, f"style_{mode}", log, config_hash(cfg), append=state is not None)
    return log


def load_style(paths: RunPaths, mode: str) -> StyleEncoderModel:
    return StyleEncoderModel.load(_require(paths.style(mode), f"{mode} style encoder checkpoint"))[0]


# stage: diffusion -----------------------------------------------------------------------

def diffusion_inputs(cfg: dict, ds: Dataset, idx: np.ndarray, style_model: StyleEncoderModel,
                     style_refs: np.ndarray | None = None) -> Conditions:
    """Conditions for clips ``idx``; style is taken from ``style_refs`` (default: the clips themselves)."""
    refs = idx if style_refs is None else style_refs
    return Conditions(style=encode_style(ds.motion[refs], style_model, ds.layout),
                      content=ds.content[idx],
                      rhythm=ds.rhythm[idx] if uses_rhythm(cfg) else None,
                      emotion=ds.emotion[idx] if uses_emotion(cfg) else None)


def train_diffusion_stage(cfg: dict, paths: RunPaths, resume: bool = False, stop_at: int | None = None,
                          on_step: Callable[[str, int, dict], None] | None = None) -> TrainLog:
    ds = load_run_data(paths)
    codecs = load_codecs(paths, ds.layout.names)
    mode = style_mode(cfg)
    style_model = load_style(paths, mode)
    paths.ensure()
    variant = variant_name(cfg)
    full = diffusion_config(cfg)
    stage_hash = section_hash(cfg, "diffusion.", "rvq.", "style.", "data.", "ablation.")
    ck = paths.diffusion(variant)
    state = _resume_point(ck, stage_hash, resume)

    idx = ds.index("train")
    codec = PartCodec(codecs, ds.layout)
    latents = codec.quantized_latents(ds.motion[idx])
    codec.fit_normaliser(latents)
    cond = diffusion_inputs(cfg, ds, idx, style_model)

    model = opt_state = rng_state = None
    start = 0
    if state is not None:
        model, _, rest = Denoiser.load(ck)
        model.config = full
        opt_state, rng_state, start = _opt_state(rest), state["rng_state"], state["step"]
    run_cfg = dataclasses.replace(full, steps=_step_limit(full.steps, stop_at))
    cb = None if on_step is None else (lambda s, row: on_step(f"diffusion_{variant}", s, row))
    model, log, opt, rng = train_diffusion(codec.normalise(latents), cond, run_cfg, model, opt_state, start,
                                           rng_state, on_step=cb, total_steps=full.steps)
    model.config = full
    step = max(start, run_cfg.steps)
    model.save(ck, {"stage_hash": stage_hash, "config_hash": config_hash(cfg), "step": step,
                    "complete": step >= full.steps, "rng_state": rng.bit_generator.state, "variant": variant,
                    "style_mode": mode, "rhythm": uses_rhythm(cfg), "emotion": uses_emotion(cfg)},
               {"norm.mean": codec.mean, "norm.std": codec.std, **_opt_tensors(opt)})
    _write_log(paths, f"diffusion_{variant}", log, config_hash(cfg), append=state is not None)
    return log


def train_stage(cfg: dict, paths: RunPaths, stage: str, resume: bool = False, stop_at: int | None = None,
                on_step=None):
    if stage == "rvq":
        return train_rvq_stage(cfg, paths, resume, stop_at, on_step)
    if stage == "style":
        return train_style_stage(cfg, paths, resume=resume, stop_at=stop_at, on_step=on_step)
    if stage == "diffusion":
        return train_diffusion_stage(cfg, paths, resume, stop_at, on_step)
    raise ValidationError(f"unknown stage {stage!r}; choose from {list(STAGES)}")


# generation -----------------------------------------------------------------------------

def plan_pairs(ds: Dataset, n: int, seed: int, split: str = "test") -> list[tuple[int, int, int]]:
    """(audio index, style reference index, intended style) triples cycling through the styles."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    pool = ds.index(split)
    if len(pool) == 0:
        raise ValidationError(f"split {split!r} is empty")
    rng = np.random.default_rng([seed, 17])
    audio = pool[rng.permutation(len(pool))]
    labels = sorted(set(int(s) for s in ds.styles[pool]))
    out = []
    for j in range(n):
        a = int(audio[j % len(audio)])
        k = labels[j % len(labels)]
        cands = pool[(ds.styles[pool] == k) & (pool != a)]
        if len(cands) == 0:
            cands = pool[ds.styles[pool] == k]
        out.append((a, int(rng.choice(cands)), k))
    return out


def clip_digest(values: np.ndarray) -> str:
    import hashlib
    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()


def _load_denoiser(cfg: dict, paths: RunPaths, untrained: bool) -> tuple[Denoiser, np.ndarray, np.ndarray]:
    model, extra, rest = Denoiser.load(_require(paths.diffusion(variant_name(cfg)),
                                                f"diffusion checkpoint for variant {variant_name(cfg)!r}"))
    if not extra.get("complete", True):
        raise MissingPrerequisite(f"diffusion training for {variant_name(cfg)!r} is incomplete; resume it first")
    if untrained:
        c = model.config
        model = Denoiser(c, np.random.default_rng(c.seed + 1))
    return model, rest["norm.mean"], rest["norm.std"]


def generate(cfg: dict, paths: RunPaths, n: int | None = None, seed: int | None = None,
             weights: GuidanceWeights | None = None, name: str | None = None,
             pairs: Sequence[tuple[int, int, int]] | None = None, untrained: bool = False,
             audio_ids: Sequence[str] | None = None, ref_ids: Sequence[str] | None = None) -> dict:
    """Sample clips whose speech comes from one clip and style from another; returns the manifest."""
    ds = load_run_data(paths)
    n = cfg["eval.n_generate"] if n is None else n
    seed = cfg["seed"] if seed is None else seed
    weights = weights or guidance_weights(cfg)
    model, mean, std = _load_denoiser(cfg, paths, untrained)
    codec = PartCodec(load_codecs(paths, ds.layout.names), ds.layout, mean, std)
    style_model = load_style(paths, style_mode(cfg))
    if audio_ids is not None or ref_ids is not None:
        pairs = _explicit_pairs(ds, audio_ids, ref_ids, n)
    pairs = list(pairs) if pairs is not None else plan_pairs(ds, n, seed)
    a_idx = np.array([p[0] for p in pairs])
    r_idx = np.array([p[1] for p in pairs])
    cond = diffusion_inputs(cfg, ds, a_idx, style_model, r_idx)
    schedule = make_schedule(model.config.n_steps, model.config.schedule)
    motion = []
    for c, s in enumerate(range(0, len(pairs), SAMPLE_CHUNK)):
        sub = cond.take(np.arange(s, min(s + SAMPLE_CHUNK, len(pairs))))
        z = sample_latent(model, schedule, sub, weights, model.config.infer_steps, seed=int(seed) * 1000 + c)
        motion.append(codec.to_motion(z))
    motion = np.concatenate(motion)

    name = name or variant_name(cfg) + ("_untrained" if untrained else "")
    out = paths.generated / name
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for j, ((a, r, k), values) in enumerate(zip(pairs, motion)):
        cid = f"g{j:04d}"
        save_clip(out / "clips" / f"{cid}.mpc",
                  MotionClip(values, ds.fps, ds.layout, int(k), int(k),
                             {"audio_id": ds.ids[a], "ref_id": ds.ids[r]}))
        entries.append({"id": cid, "clip": f"clips/{cid}.mpc", "audio_id": ds.ids[a], "ref_id": ds.ids[r],
                        "intended_style": int(k), "digest": clip_digest(values)})
    manifest = sampling_manifest(seed, weights, schedule, model.config.infer_steps, cond,
                                 {"config_hash": config_hash(cfg), "variant": variant_name(cfg),
                                  "untrained": untrained, "clips": entries,
                                  "digest": clip_digest(motion)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _explicit_pairs(ds: Dataset, audio_ids, ref_ids, n: int) -> list[tuple[int, int, int]]:
    pos = {c: i for i, c in enumerate(ds.ids)}
    audio_ids = list(audio_ids or [])
    ref_ids = list(ref_ids or [])
    if not audio_ids or not ref_ids:
        raise ValidationError("explicit generation needs both audio and reference clip ids")
    for c in audio_ids + ref_ids:
        if c not in pos:
            raise ValidationError(f"unknown clip id {c!r}")
    out = []
    for j in range(n):
        a, r = pos[audio_ids[j % len(audio_ids)]], pos[ref_ids[j % len(ref_ids)]]
        out.append((a, r, int(ds.styles[r])))
    return out


def load_generated(paths: RunPaths, name: str) -> tuple[np.ndarray, dict]:
    root = paths.generated / name
    path = root / "manifest.json"
    if not path.exists():
        raise MissingPrerequisite(f"no generated clips at {root}")
    manifest = json.loads(path.read_text())
    if not manifest.get("clips"):
        raise ValidationError(f"{root} contains no clips")
    clips = np.stack([load_clip(root / e["clip"]).values for e in manifest["clips"]])
    return clips, manifest


# evaluation -----------------------------------------------------------------------------

def ensure_classifier(cfg: dict, paths: RunPaths, ds: Dataset) -> tuple[StyleClassifier, float]:
    """Style classifier trained on the train split (cached); returns it with its test accuracy."""
    stage_hash = section_hash(cfg, "data.", "eval.classifier")
    if paths.classifier.exists():
        header, named = load_named(paths.classifier)
        if header.get("kind") != "style_classifier":
            raise FormatError(f"{paths.classifier}: not a classifier checkpoint")
        if header.get("stage_hash") == stage_hash:
            return StyleClassifier.from_state(ds.layout, ds.fps, named), header["holdout_accuracy"]
    tr, te = ds.index("train"), ds.index("test")
    clf = StyleClassifier(ds.layout, ds.fps, int(ds.styles.max()) + 1)
    clf.fit(ds.motion[tr], ds.styles[tr], steps=cfg["eval.classifier_steps"], seed=cfg["seed"])
    acc = clf.accuracy(ds.motion[te], ds.styles[te])
    paths.ensure()
    save_named(paths.classifier, {"kind": "style_classifier", "stage_hash": stage_hash,
                                  "config_hash": config_hash(cfg), "holdout_accuracy": acc}, clf.state())
    return clf, acc


def time_shuffled(clips: np.ndarray, seed: int) -> np.ndarray:
    """Each clip circularly shifted by a random offset between a quarter and three quarters of its length."""
    rng = np.random.default_rng([seed, 29])
    t = clips.shape[1]
    shifts = rng.integers(t // 4, 3 * t // 4 + 1, size=len(clips))
    return np.stack([np.roll(c, int(s), axis=0) for c, s in zip(clips, shifts)])


def evaluate_clips(cfg: dict, paths: RunPaths, ds: Dataset, clips: np.ndarray, audio_idx: np.ndarray,
                   intended: np.ndarray, metrics: Sequence[str] = METRICS,
                   reference_split: str = "test") -> list[dict]:
    """One row per metric and scope for a batch of clips with known audio and intended style."""
    for m in metrics:
        if m not in METRICS:
            raise ValidationError(f"unknown metric {m!r}; choose from {list(METRICS)}")
    if len(clips) == 0:
        raise ValidationError("no clips to evaluate")
    h = config_hash(cfg)
    rows: list[dict] = []

    def row(metric, scope, value):
        rows.append({"metric": metric, "scope": scope, "value": float(value), "n": len(clips), "config_hash": h})

    names = ds.layout.names
    if "fgd" in metrics:
        evaluator = load_style(paths, "part")
        ref = ds.motion[ds.index(reference_split)]
        e_gen = encode_style(clips, evaluator, ds.layout)
        e_ref = encode_style(ref, evaluator, ds.layout)
        for p, name in enumerate(names):
            row("fgd", name, fgd(FeatureDist.from_features(e_gen[:, p]), FeatureDist.from_features(e_ref[:, p])))
        row("fgd", "all", fgd(FeatureDist.from_features(e_gen.reshape(len(clips), -1)),
                              FeatureDist.from_features(e_ref.reshape(len(ref), -1))))
    if "bc" in metrics:
        sigma = cfg["eval.sigma"]
        beats = [ds.beats[a] for a in audio_idx]
        bc = lambda xs, ch=None: float(np.mean([beat_consistency(x, b, ds.fps, sigma, ch) for x, b in zip(xs, beats)]))
        row("bc", "all", bc(clips))
        for name in names:
            row("bc", name, bc(clips, ds.layout.part(name)))
        row("bc", "shuffled", bc(time_shuffled(clips, cfg["seed"])))
    if "diversity" in metrics and len(clips) >= 2:
        row("diversity", "all", diversity(clips))
        for name in names:
            row("diversity", name, diversity(clips, channels=ds.layout.part(name)))
    if "sra" in metrics:
        clf, _ = ensure_classifier(cfg, paths, ds)
        row("sra", "all", clf.accuracy(clips, intended))
    return rows


def evaluate(cfg: dict, paths: RunPaths, source: str, metrics: Sequence[str] = METRICS,
             reference_split: str = "test", report_name: str | None = None) -> list[dict]:
    """Evaluate ``generated/<source>`` or, with source ``real``, the reference split itself."""
    ds = load_run_data(paths)
    if source == "real":
        idx = ds.index(reference_split)
        clips, audio, intended = ds.motion[idx], idx, ds.styles[idx]
    else:
        clips, manifest = load_generated(paths, source)
        pos = {c: i for i, c in enumerate(ds.ids)}
        audio = np.array([pos[e["audio_id"]] for e in manifest["clips"]])
        intended = np.array([e["intended_style"] for e in manifest["clips"]])
    rows = evaluate_clips(cfg, paths, ds, clips, audio, intended, metrics, reference_split)
    paths.ensure()
    stem = paths.reports / f"{report_name or source}_report"
    write_report(rows, stem.with_suffix(".json"), stem.with_suffix(".csv"))
    return rows


def rvq_report(cfg: dict, paths: RunPaths, split: str = "test") -> list[dict]:
    """Reconstruction L1 per part of the trained codecs and of freshly initialised ones."""
    ds = load_run_data(paths)
    parts = split_clip(ds.motion[ds.index(split)], ds.layout)
    rows = []
    h = config_hash(cfg)
    for k, (name, model, x) in enumerate(zip(ds.layout.names, load_codecs(paths, ds.layout.names), parts)):
        fresh = RvqModel(model.config, np.random.default_rng(model.config.seed + 1))
        trained_l1, fresh_l1 = reconstruction_l1(model, x), reconstruction_l1(fresh, x)
        rows.append({"metric": "rvq_l1", "scope": name, "value": trained_l1, "n": len(x), "config_hash": h})
        rows.append({"metric": "rvq_l1_untrained", "scope": name, "value": fresh_l1, "n": len(x), "config_hash": h})
    paths.ensure()
    write_report(rows, paths.reports / "rvq_report.json", paths.reports / "rvq_report.csv")
    return rows


def lookup(rows: Sequence[dict], metric: str, scope: str = "all") -> float:
    for r in rows:
        if r["metric"] == metric and r["scope"] == scope:
            return r["value"]
    raise KeyError(f"{metric}/{scope} not in report")


# orchestration --------------------------------------------------------------------------

def stage_is_current(path: Path, stage_hash: str) -> bool:
    if not path.exists():
        return False
    header, _ = load_named(path)
    extra = header.get("extra", {})
    return extra.get("stage_hash") == stage_hash and extra.get("complete", False)


def ensure_trained(cfg: dict, paths: RunPaths, log: Callable[[str], None] = lambda s: None) -> list[str]:
    """Train whichever stages are missing or stale for this configuration's variant.

    Returns the names of the stages that were (re)built.
    """
    built = []
    if not (paths.data / "manifest.json").exists():
        log("synthesising data")
        synth_data(cfg, paths)
        built.append("data")
    names = load_run_data(paths).layout.names
    rvq_hash = section_hash(cfg, "rvq.", "data.")
    if not all(stage_is_current(paths.rvq(n), rvq_hash) for n in names):
        log("training rvq")
        train_rvq_stage(cfg, paths)
        built.append("rvq")
    mode = style_mode(cfg)
    for m in sorted({mode, "part"}):  # the part encoder doubles as the FGD feature extractor
        if not stage_is_current(paths.style(m), section_hash(cfg, "style.", "data.") + f":{m}"):
            log(f"training style ({m})")
            train_style_stage(cfg, paths, mode=m)
            built.append(f"style_{m}")
    d_hash = section_hash(cfg, "diffusion.", "rvq.", "style.", "data.", "ablation.")
    if not stage_is_current(paths.diffusion(variant_name(cfg)), d_hash):
        log(f"training diffusion ({variant_name(cfg)})")
        train_diffusion_stage(cfg, paths)
        built.append(f"diffusion_{variant_name(cfg)}")
    return built


def summary_row(variant: str, rows: Sequence[dict]) -> dict:
    return {"variant": variant, "fgd": lookup(rows, "fgd"), "bc": lookup(rows, "bc"),
            "diversity": lookup(rows, "diversity"), "sra": lookup(rows, "sra")}


def ablate(cfg: dict, paths: RunPaths, rows: Sequence[str] = ABLATIONS, n: int | None = None,
           seed: int | None = None, log: Callable[[str], None] = lambda s: None) -> list[dict]:
    """Train and evaluate the full model and each ablation row with identical seeds and pairings."""
    for r in rows:
        if r not in ABLATIONS:
            raise ValidationError(f"unknown ablation row {r!r}; choose from {list(ABLATIONS)}")
    table = []
    for variant in ["full", *rows]:
        vcfg = with_ablation(cfg, variant)
        t0 = time.perf_counter()
        ensure_trained(vcfg, paths, log)
        generate(vcfg, paths, n=n, seed=seed, name=f"ablate_{variant}")
        rep = evaluate(vcfg, paths, f"ablate_{variant}")
        table.append({**summary_row(variant, rep), "seconds": time.perf_counter() - t0})
        log(f"{variant}: " + ", ".join(f"{k}={v:.4f}" for k, v in table[-1].items() if k != "variant"))
    _write_table(paths.reports / "ablation", table, config_hash(cfg))
    return table


def _write_table(stem: Path, table: list[dict], cfg_hash: str) -> None:
    import csv
    stem.with_suffix(".json").write_text(json.dumps({"config_hash": cfg_hash, "rows": table}, indent=1))
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]) + ["config_hash"])
        w.writeheader()
        for r in table:
            w.writerow({**r, "config_hash": cfg_hash})


def end_to_end(cfg: dict, paths: RunPaths, log: Callable[[str], None] = lambda s: None) -> dict:
    """Full synthetic run plus the baselines it is judged against."""
    t0 = time.perf_counter()
    built = ensure_trained(cfg, paths, log)
    rvq_rows = rvq_report(cfg, paths)
    gen = generate(cfg, paths)
    rows = evaluate(cfg, paths, variant_name(cfg))
    generate(cfg, paths, untrained=True)
    base = evaluate(cfg, paths, variant_name(cfg) + "_untrained", metrics=("fgd",))
    names = load_run_data(paths).layout.names
    result = {
        "rvq_l1": {n: lookup(rvq_rows, "rvq_l1", n) for n in names},
        "rvq_l1_untrained": {n: lookup(rvq_rows, "rvq_l1_untrained", n) for n in names},
        "fgd": {n: lookup(rows, "fgd", n) for n in names},
        "fgd_untrained": {n: lookup(base, "fgd", n) for n in names},
        "sra": lookup(rows, "sra"),
        "bc": lookup(rows, "bc"),
        "bc_shuffled": lookup(rows, "bc", "shuffled"),
        "diversity": lookup(rows, "diversity"),
        "generated_digest": gen["digest"],
        "seconds": time.perf_counter() - t0,
        "built": built,
        "config_hash": config_hash(cfg),
    }
    (paths.reports / "end_to_end.json").write_text(json.dumps(result, indent=1))
    return result
