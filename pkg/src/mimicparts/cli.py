"""Command-line driver.

Exit codes: 0 success, 2 validation error, 3 missing prerequisite. The
MIMICPARTS_SEED environment variable overrides the configured seed.
"""
from __future__ import annotations

import os

# Single-threaded BLAS keeps floating-point reductions in a fixed order, so
# training losses repeat bit for bit. Must happen before numpy is imported.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ABLATIONS, ConfigError, PRESETS, config_hash, load_config  # noqa: E402

EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_MISSING = 0, 1, 2, 3


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _weights(text: str):
    from .diffusion import GuidanceWeights
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"weights must be numbers, got {text!r}") from exc
    if len(vals) != 3:
        raise ConfigError("weights take three values: w_c,w_s,w_re")
    try:
        return GuidanceWeights(*vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="JSON file of dotted config keys")
    common.add_argument("--preset", default=None, choices=sorted(PRESETS), help="base preset (default: toy)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; VALUE is parsed as JSON")

    p = argparse.ArgumentParser(prog="mimicparts", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    sub.add_parser("synth-data", parents=[common], help="synthesise the paired speech/motion corpus")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=["rvq", "style", "diffusion"])
    t.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")
    t.add_argument("--stop-at", type=int, help="stop after this many steps (checkpoint is resumable)")

    g = sub.add_parser("generate", parents=[common], help="sample clips from the trained pipeline")
    g.add_argument("--n", type=int, help="number of clips (default: eval.n_generate)")
    g.add_argument("--seed", type=int, help="sampling seed (default: config seed)")
    g.add_argument("--weights", help="guidance weights w_c,w_s,w_re")
    g.add_argument("--audio", nargs="+", help="clip ids supplying the speech features")
    g.add_argument("--ref", nargs="+", help="clip ids supplying the style reference")
    g.add_argument("--name", help="output directory name under generated/")
    g.add_argument("--untrained", action="store_true", help="sample from a freshly initialised denoiser")

    e = sub.add_parser("evaluate", parents=[common], help="score generated clips")
    e.add_argument("--source", default=None, help="generated/<name>, or 'real' for the reference split")
    e.add_argument("--metrics", default="fgd,bc,diversity,sra", help="comma-separated subset")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])

    a = sub.add_parser("ablate", parents=[common], help="retrain and compare ablation rows")
    a.add_argument("--rows", default=",".join(ABLATIONS), help="comma-separated rows")
    a.add_argument("--n", type=int)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every trainable module")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--rtol", type=float, default=1e-4)
    return p


def _event(run_dir: Path, record: dict) -> None:
    logs = run_dir / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    with open(logs / "cli.jsonl", "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _run(args, cfg: dict, say) -> int:
    from . import pipeline as pl

    paths = pl.RunPaths(Path(args.run_dir))
    if args.verb == "gradcheck":
        from .gradsuite import run_suite
        results = run_suite(h=args.h, rtol=args.rtol, seed=cfg["seed"])
        for r in results:
            say(r.line())
        return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED

    paths.ensure()
    (paths.root / "config.json").write_text(json.dumps({"config_hash": config_hash(cfg), **cfg}, indent=1))
    if args.verb == "synth-data":
        manifest = pl.synth_data(cfg, paths)
        say(f"{len(manifest['clips'])} clips, digest {manifest['digest']}")
    elif args.verb == "train":
        if args.stop_at is not None and args.stop_at < 1:
            raise pl.ValidationError("--stop-at must be positive")
        out = pl.train_stage(cfg, paths, args.stage, resume=args.resume, stop_at=args.stop_at,
                             on_step=_progress(say))
        logs = out if isinstance(out, dict) else {args.stage: out}
        for name, log in logs.items():
            if log.entries:
                say(f"{name}: steps {log.entries[0]['step']}..{log.entries[-1]['step']}, "
                    f"final loss {log.entries[-1]['loss']:.5f}")
            else:
                say(f"{name}: nothing to do")
    elif args.verb == "generate":
        weights = _weights(args.weights) if args.weights else None
        man = pl.generate(cfg, paths, n=args.n, seed=args.seed, weights=weights, name=args.name,
                          untrained=args.untrained, audio_ids=args.audio, ref_ids=args.ref)
        say(f"{len(man['clips'])} clips -> generated/{args.name or man['variant']}, digest {man['digest']}")
    elif args.verb == "evaluate":
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
        rows = pl.evaluate(cfg, paths, args.source or pl.variant_name(cfg), metrics, args.split)
        for r in rows:
            say(f"{r['metric']:<10} {r['scope']:<9} {r['value']:.6f}")
    elif args.verb == "ablate":
        rows = [r.strip() for r in args.rows.split(",") if r.strip()]
        table = pl.ablate(cfg, paths, rows, n=args.n, log=say)
        say(f"{'variant':<20} {'fgd':>9} {'bc':>7} {'div':>7} {'sra':>6}")
        for r in table:
            say(f"{r['variant']:<20} {r['fgd']:9.4f} {r['bc']:7.4f} {r['diversity']:7.4f} {r['sra']:6.3f}")
    return EXIT_OK


def _progress(say, every: int = 100):
    def cb(name, step, row):
        if step % every == 0:
            say(f"{name} step {step} loss {row['loss']:.5f}")
    return cb


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    say = lambda msg: print(msg, flush=True)
    t0 = time.perf_counter()
    code, error = EXIT_OK, None
    cfg: dict = {}
    try:
        from . import pipeline as pl
        from .numerics.serialize import FormatError
        try:
            cfg = load_config(args.config, args.preset, _parse_set(args.set))
            code = _run(args, cfg, say)
        except (ConfigError, pl.ValidationError) as exc:
            code, error = EXIT_INVALID, str(exc)
        except (pl.MissingPrerequisite, FormatError) as exc:
            code, error = EXIT_MISSING, str(exc)
        except FileNotFoundError as exc:
            code, error = (EXIT_INVALID if args.config and not Path(args.config).exists() else EXIT_MISSING), str(exc)
        except (PermissionError, IsADirectoryError, NotADirectoryError) as exc:
            code, error = EXIT_INVALID, f"cannot write: {exc}"
        except ValueError as exc:
            code, error = EXIT_INVALID, str(exc)
    finally:
        if error:
            print(f"error: {error}", file=sys.stderr)
    if args.verb != "gradcheck" and Path(args.run_dir).is_dir():
        try:
            _event(Path(args.run_dir), {"verb": args.verb, "argv": argv if argv is not None else sys.argv[1:],
                                        "config_hash": config_hash(cfg) if cfg else None, "exit": code,
                                        "error": error, "seconds": round(time.perf_counter() - t0, 3)})
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
