from __future__ import annotations

import json

import numpy as np
import pytest

from mimicparts import pipeline as pl
from mimicparts.config import make_config
from mimicparts.diffusion import GuidanceWeights
from mimicparts.metrics import StyleClassifier


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    cfg = make_config("smoke")
    paths = pl.RunPaths(tmp_path_factory.mktemp("run"))
    pl.ensure_trained(cfg, paths)
    return cfg, paths


def test_synth_data_is_deterministic(tmp_path):
    cfg = make_config("smoke")
    a = pl.synth_data(cfg, pl.RunPaths(tmp_path / "a"))
    b = pl.synth_data(cfg, pl.RunPaths(tmp_path / "b"))
    assert a["digest"] == b["digest"] and a["config_hash"] == b["config_hash"]
    assert len(a["clips"]) == cfg["data.n_styles"] * cfg["data.clips_per_style"]
    c = pl.synth_data(make_config("smoke", {"seed": 1}), pl.RunPaths(tmp_path / "c"))
    assert c["digest"] != a["digest"]


def test_stage_ordering_enforced(tmp_path):
    cfg = make_config("smoke")
    paths = pl.RunPaths(tmp_path)
    with pytest.raises(pl.MissingPrerequisite):
        pl.train_stage(cfg, paths, "rvq")
    pl.synth_data(cfg, paths)
    with pytest.raises(pl.MissingPrerequisite):
        pl.train_stage(cfg, paths, "diffusion")
    with pytest.raises(pl.ValidationError):
        pl.train_stage(cfg, paths, "vocoder")


def test_checkpoints_embed_config_hash(smoke):
    cfg, paths = smoke
    from mimicparts.numerics.serialize import load_named
    header, _ = load_named(paths.diffusion("full"))
    assert header["extra"]["config_hash"]
    assert header["extra"]["complete"] is True
    logs = [json.loads(line) for line in (paths.logs / "diffusion_full.jsonl").read_text().splitlines()]
    assert len(logs) == cfg["diffusion.steps"]
    assert (paths.logs / "diffusion_full_loss.svg").read_text().startswith("<svg")


@pytest.mark.parametrize("stage", ["rvq", "style", "diffusion"])
def test_resume_reproduces_uninterrupted_run(smoke, tmp_path, stage):
    cfg, base = smoke
    cfg = make_config("smoke", {f"{stage}.steps": 30})
    paths = pl.RunPaths(tmp_path)
    # prerequisites copied from the shared run
    import shutil
    shutil.copytree(base.data, paths.data)
    shutil.copytree(base.checkpoints, paths.checkpoints)
    logs_full = pl.train_stage(cfg, paths, stage)
    logs_cut = pl.train_stage(cfg, paths, stage, stop_at=15)
    logs_rest = pl.train_stage(cfg, paths, stage, resume=True)
    full = logs_full if isinstance(logs_full, dict) else {"x": logs_full}
    cut = logs_cut if isinstance(logs_cut, dict) else {"x": logs_cut}
    rest = logs_rest if isinstance(logs_rest, dict) else {"x": logs_rest}
    for k in full:
        before, after = cut[k].losses(), rest[k].losses()
        assert len(before) == 15 and len(after) == 15
        np.testing.assert_array_equal(np.concatenate([before, after]), full[k].losses())
    # an incomplete diffusion checkpoint is refused for sampling
    if stage == "diffusion":
        pl.train_stage(cfg, paths, stage, stop_at=5)
        with pytest.raises(pl.MissingPrerequisite):
            pl.generate(cfg, paths, n=1)


def test_resume_refuses_changed_config(smoke, tmp_path):
    import shutil
    cfg, base = smoke
    paths = pl.RunPaths(tmp_path)
    shutil.copytree(base.data, paths.data)
    pl.train_stage(cfg, paths, "style", stop_at=3)
    with pytest.raises(pl.ValidationError):
        pl.train_stage(make_config("smoke", {"style.lr": 0.5}), paths, "style", resume=True)


def test_generate_is_seed_deterministic_and_weight_sensitive(smoke):
    cfg, paths = smoke
    a = pl.generate(cfg, paths, n=1, seed=5, name="a")
    b = pl.generate(cfg, paths, n=1, seed=5, name="b")
    assert a["digest"] == b["digest"]
    zero = pl.generate(cfg, paths, n=2, seed=5, weights=GuidanceWeights(0, 0, 0), name="w0")
    std = pl.generate(cfg, paths, n=2, seed=5, weights=GuidanceWeights(1, 2, 1), name="w1")
    assert zero["digest"] != std["digest"]
    assert zero["weights"] == {"w_c": 0.0, "w_s": 0.0, "w_re": 0.0, "w_r": None, "w_e": None}


def test_generate_style_from_a_audio_from_b(smoke):
    cfg, paths = smoke
    ds = pl.load_run_data(paths)
    test = ds.index("test")
    a, b = ds.ids[test[0]], ds.ids[test[-1]]
    man = pl.generate(cfg, paths, n=1, seed=0, audio_ids=[b], ref_ids=[a], name="ab")
    clips, _ = pl.load_generated(paths, "ab")
    assert clips.shape[1] == ds.content[test[-1]].shape[0]
    assert man["clips"][0]["audio_id"] == b and man["clips"][0]["ref_id"] == a
    assert man["clips"][0]["intended_style"] == int(ds.styles[test[0]])
    with pytest.raises(pl.ValidationError):
        pl.generate(cfg, paths, n=1, audio_ids=["nope"], ref_ids=[a])


def test_plan_pairs_cycles_styles(smoke):
    _, paths = smoke
    ds = pl.load_run_data(paths)
    pairs = pl.plan_pairs(ds, 8, seed=0)
    assert [k for _, _, k in pairs] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert all(ds.styles[r] == k for _, r, k in pairs)
    assert pairs == pl.plan_pairs(ds, 8, seed=0)
    with pytest.raises(pl.ValidationError):
        pl.plan_pairs(ds, 0, seed=0)


def test_evaluate_metric_selection_and_real_consistency(smoke):
    cfg, paths = smoke
    pl.generate(cfg, paths, name="ev")
    rows = pl.evaluate(cfg, paths, "ev", metrics=["bc"])
    assert {r["metric"] for r in rows} == {"bc"}
    assert {r["scope"] for r in rows} == {"all", "upper", "hands", "lower", "shuffled"}
    full = pl.evaluate(cfg, paths, "ev")
    assert {(r["metric"], r["scope"]) for r in full} >= {("fgd", "upper"), ("sra", "all"), ("diversity", "hands")}
    real = pl.evaluate(cfg, paths, "real")
    _, holdout = pl.ensure_classifier(cfg, paths, pl.load_run_data(paths))
    assert pl.lookup(real, "sra") == holdout
    # the smoke test split has 4 clips, so the covariances are rank-deficient and the
    # nested square roots leave about sqrt(machine eps) per null direction
    assert all(abs(r["value"]) < 1e-4 for r in real if r["metric"] == "fgd")
    assert (paths.reports / "ev_report.csv").exists()
    with pytest.raises(pl.ValidationError):
        pl.evaluate(cfg, paths, "ev", metrics=["psnr"])
    with pytest.raises(pl.MissingPrerequisite):
        pl.evaluate(cfg, paths, "does_not_exist")


def test_classifier_is_cached(smoke):
    cfg, paths = smoke
    ds = pl.load_run_data(paths)
    c1, a1 = pl.ensure_classifier(cfg, paths, ds)
    c2, a2 = pl.ensure_classifier(cfg, paths, ds)
    assert a1 == a2 and isinstance(c2, StyleClassifier)
    np.testing.assert_array_equal(c1.w, c2.w)


def test_time_shuffled_is_a_roll(rng):
    x = rng.normal(size=(3, 16, 2))
    y = pl.time_shuffled(x, 0)
    for a, b in zip(x, y):
        assert any(np.array_equal(np.roll(a, s, axis=0), b) for s in range(4, 13))


def test_codec_round_trip_shapes(smoke):
    _, paths = smoke
    ds = pl.load_run_data(paths)
    codec = pl.PartCodec(pl.load_codecs(paths, ds.layout.names), ds.layout)
    lat = codec.quantized_latents(ds.motion[:3])
    codec.fit_normaliser(lat)
    out = codec.to_motion(codec.normalise(lat))
    assert out.shape == ds.motion[:3].shape


def test_ablation_rows_and_flags(smoke):
    cfg, _ = smoke
    v = pl.with_ablation(cfg, "no_rhythm_emotion")
    assert not pl.uses_rhythm(v) and not pl.uses_emotion(v) and pl.style_mode(v) == "part"
    assert pl.style_mode(pl.with_ablation(cfg, "no_part_style")) == "global"
    assert pl.variant_name(pl.with_ablation(cfg, "full")) == "full"
    with pytest.raises(pl.ValidationError):
        pl.with_ablation(cfg, "no_legs")


def test_ablate_smoke_table(smoke):
    cfg, paths = smoke
    table = pl.ablate(cfg, paths, ["no_rhythm", "no_part_style"], n=8)
    assert [r["variant"] for r in table] == ["full", "no_rhythm", "no_part_style"]
    assert paths.style("global").exists() and paths.diffusion("no_rhythm").exists()
    saved = json.loads((paths.reports / "ablation.json").read_text())
    assert [r["variant"] for r in saved["rows"]] == ["full", "no_rhythm", "no_part_style"]
    with pytest.raises(pl.ValidationError):
        pl.ablate(cfg, paths, ["no_legs"])
