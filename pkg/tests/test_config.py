from __future__ import annotations

import json

import pytest

from mimicparts.config import (
    DEFAULTS,
    PRESETS,
    ConfigError,
    config_hash,
    load_config,
    make_config,
    section_hash,
)


def test_every_preset_key_is_documented_default():
    for name, preset in PRESETS.items():
        assert set(preset) <= set(DEFAULTS), name
        make_config(name)


def test_defaults_describe_the_toy_benchmark():
    cfg = make_config()
    assert cfg["data.n_styles"] == 4 and cfg["data.clips_per_style"] == 200
    assert cfg["data.split"] == [0.85, 0.075, 0.075]
    assert cfg["diffusion.p_drop"] == 0.1
    assert not any(cfg[k] for k in cfg if k.startswith("ablation."))


@pytest.mark.parametrize("override", [
    {"nope": 1},
    {"data.clips_per_style": 0},
    {"rvq.steps": 1.5},
    {"ablation.no_rhythm": "yes"},
    {"data.frames": 130},
    {"diffusion.schedule": "quadratic"},
    {"diffusion.infer_steps": 500},
    {"style.half_frames": 100},
])
def test_invalid_overrides_rejected(override):
    with pytest.raises(ConfigError):
        make_config("toy", override)


def test_int_valued_float_accepted_for_int_key():
    assert make_config("toy", {"rvq.steps": 10.0})["rvq.steps"] == 10


def test_file_then_overrides_then_env(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "smoke", "rvq.steps": 7, "seed": 3}))
    monkeypatch.delenv("MIMICPARTS_SEED", raising=False)
    cfg = load_config(path, overrides={"style.steps": 9})
    assert cfg["rvq.steps"] == 7 and cfg["style.steps"] == 9 and cfg["seed"] == 3
    assert cfg["data.clips_per_style"] == PRESETS["smoke"]["data.clips_per_style"]
    monkeypatch.setenv("MIMICPARTS_SEED", "11")
    assert load_config(path)["seed"] == 11
    assert load_config(path, preset="toy")["data.clips_per_style"] == 200


def test_bad_env_seed_and_bad_json(tmp_path, monkeypatch):
    monkeypatch.setenv("MIMICPARTS_SEED", "abc")
    with pytest.raises(ConfigError):
        load_config()
    monkeypatch.delenv("MIMICPARTS_SEED")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_hashes_track_relevant_keys_only():
    a = make_config()
    b = make_config("toy", {"diffusion.steps": 5})
    assert config_hash(a) != config_hash(b)
    assert section_hash(a, "rvq.", "data.") == section_hash(b, "rvq.", "data.")
    assert section_hash(a, "diffusion.") != section_hash(b, "diffusion.")
    assert config_hash(a) == config_hash(make_config())
