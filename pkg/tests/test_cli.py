from __future__ import annotations

import json

import pytest

from mimicparts.cli import EXIT_INVALID, EXIT_MISSING, EXIT_OK, main


def run(tmp_path, verb, *args):
    return main([verb, "--run-dir", str(tmp_path / "run"), "--preset", "smoke", *args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(root, "synth-data") == EXIT_OK
    for stage in ("rvq", "style", "diffusion"):
        assert run(root, "train", "--stage", stage) == EXIT_OK
    return root


def test_stage_ordering_exit_code(tmp_path, capsys):
    assert run(tmp_path, "train", "--stage", "diffusion") == EXIT_MISSING
    assert "error" in capsys.readouterr().err
    assert run(tmp_path, "synth-data") == EXIT_OK
    assert run(tmp_path, "train", "--stage", "diffusion") == EXIT_MISSING
    assert run(tmp_path, "generate") == EXIT_MISSING


def test_validation_exit_codes(tmp_path):
    assert run(tmp_path, "synth-data", "--set", "data.clips_per_style=0") == EXIT_INVALID
    assert run(tmp_path, "synth-data", "--set", "no.such.key=1") == EXIT_INVALID
    assert run(tmp_path, "synth-data", "--set", "missing_equals") == EXIT_INVALID
    assert run(tmp_path, "synth-data", "--config", str(tmp_path / "absent.json")) == EXIT_INVALID


def test_unwritable_run_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth-data", "--run-dir", str(blocker / "run"), "--preset", "smoke"]) == EXIT_INVALID


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MIMICPARTS_SEED", "4")
    assert run(tmp_path, "synth-data") == EXIT_OK
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["seed"] == 4
    events = [json.loads(x) for x in (tmp_path / "run" / "logs" / "cli.jsonl").read_text().splitlines()]
    assert events[-1]["verb"] == "synth-data" and events[-1]["exit"] == 0 and events[-1]["config_hash"]


def test_same_seed_same_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "synth-data") == EXIT_OK and run(b, "synth-data") == EXIT_OK
    ma = json.loads((a / "run" / "data" / "manifest.json").read_text())
    mb = json.loads((b / "run" / "data" / "manifest.json").read_text())
    assert ma["digest"] == mb["digest"]


def test_generate_evaluate_round(trained, capsys):
    assert run(trained, "generate", "--n", "2", "--seed", "3", "--name", "g1") == EXIT_OK
    assert run(trained, "generate", "--n", "2", "--seed", "3", "--name", "g2") == EXIT_OK
    m1 = json.loads((trained / "run" / "generated" / "g1" / "manifest.json").read_text())
    m2 = json.loads((trained / "run" / "generated" / "g2" / "manifest.json").read_text())
    assert m1["digest"] == m2["digest"]
    assert run(trained, "generate", "--n", "2", "--seed", "3", "--weights", "0,0,0", "--name", "g0") == EXIT_OK
    m0 = json.loads((trained / "run" / "generated" / "g0" / "manifest.json").read_text())
    assert m0["digest"] != m1["digest"]
    assert run(trained, "generate", "--weights", "1,2") == EXIT_INVALID
    capsys.readouterr()
    assert run(trained, "evaluate", "--source", "g1", "--metrics", "bc") == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("bc") for line in out)
    assert run(trained, "evaluate", "--source", "g1", "--metrics", "nope") == EXIT_INVALID
    assert run(trained, "evaluate", "--source", "missing") == EXIT_MISSING


def test_train_resume_via_cli(trained):
    assert run(trained, "train", "--stage", "style", "--stop-at", "5") == EXIT_OK
    assert run(trained, "train", "--stage", "style", "--resume") == EXIT_OK
    assert run(trained, "train", "--stage", "style", "--stop-at", "0") == EXIT_INVALID


def test_ablate_unknown_row(trained):
    assert run(trained, "ablate", "--rows", "no_legs") == EXIT_INVALID


def test_corrupt_checkpoint_reported(trained, tmp_path):
    import shutil
    copy = tmp_path / "run"
    shutil.copytree(trained / "run", copy)
    (copy / "checkpoints" / "diffusion_full.mpc").write_bytes(b"garbage")
    assert main(["generate", "--run-dir", str(copy), "--preset", "smoke"]) == EXIT_MISSING


def test_gradcheck_verb(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 8 and all(line.startswith("PASS") for line in lines)
