"""Command line entry point: ``dyss {gen-data,train,eval,bench,verify}``.

Every command is driven by a config file (or the preset names ``desk`` and
``default``) plus flags; all outputs go under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import simworld as W
from .decoder import DySSDecoder, forward
from .evalmetrics import bench_forward
from .kernels.checkpoint import ManifestError
from .kernels.tensor import no_grad

PRESETS = {"desk": C.desk_config, "default": C.RunConfig}
TRANSFORMS = {"identity": ("identity",), "fft": ("fft",), "both": ("identity", "fft")}


class CLIError(RuntimeError):
    pass


def resolve_config(args) -> C.RunConfig:
    name = args.config or "desk"
    if name in PRESETS:
        cfg = PRESETS[name]()
    else:
        cfg = C.load(name)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scenes is not None:
        cfg.scenes = args.scenes
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.no_aux:
        cfg.decoder.aux = False
    if args.no_dynamic:
        cfg.decoder.dynamic = False
    if args.transform is not None:
        cfg.decoder.transforms = TRANSFORMS[args.transform]
    if args.floor is not None:
        if args.floor > cfg.decoder.n_queries:
            raise C.ConfigError(f"--floor {args.floor} exceeds n_queries {cfg.decoder.n_queries}")
        cfg.decoder.floor = args.floor
    if args.deterministic:
        cfg.train.deterministic = True
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _out_dir(cfg: C.RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scenes(args, cfg: C.RunConfig):
    """Scenes from ``--data`` when given, else generated from the config seed."""
    if args.data:
        scenes, _, _ = W.load_dataset(args.data)
        return scenes
    return W.generate_dataset(cfg.seed, cfg.scenes, cfg.world)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    for stale in list(out.glob("scene_*.bin")) + list(out.glob("manifest.json")):
        stale.unlink()
    scenes = W.generate_dataset(cfg.seed, cfg.scenes, cfg.world)
    manifest = W.save_dataset(out, scenes, cfg.world, cfg.seed)
    print(f"wrote {len(scenes)} scenes to {manifest}")
    return 0


def cmd_train(args) -> int:
    from .training import train
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    scenes = _load_scenes(args, cfg)
    C.save(cfg, out / "config.json")

    def log(row):
        if row["step"] % max(1, args.log_every) == 0:
            print(" ".join(f"{k}={row[k]:.5g}" for k in row), flush=True)

    res = train(cfg, scenes, out_dir=out, resume=args.resume, log=log)
    with no_grad():
        traj = forward(res.model, _inputs(scenes[0], cfg)).trajectory
    _write_trajectory(out / "trajectory.jsonl", traj)
    print(f"checkpoint: {res.checkpoint}")
    return 0


def _inputs(scene, cfg):
    from .training import inputs_for
    return inputs_for(scene, cfg.world.stride)


def _write_trajectory(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _model_for(args, cfg):
    from .training import load_checkpoint
    if args.checkpoint:
        model, _, _, cfg = load_checkpoint(args.checkpoint, cfg if args.config else None)
        return model, cfg
    return DySSDecoder(cfg.decoder, seed=cfg.seed), cfg


def cmd_eval(args) -> int:
    from .training import evaluate_model
    cfg = resolve_config(args)
    model, cfg = _model_for(args, cfg)
    scenes = _load_scenes(args, cfg)
    if not scenes:
        raise CLIError("cannot evaluate on an empty dataset")
    report = evaluate_model(model, scenes, cfg.world.stride)
    out = _out_dir(cfg)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"mAP {report.mAP:.4f}  composite {report.composite:.4f}  "
          f"ATE {report.mATE:.3f} ASE {report.mASE:.3f} AOE {report.mAOE:.3f} AVE {report.mAVE:.3f}")
    for flag in report.flags:
        print(f"note: {flag}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    model, cfg = _model_for(args, cfg)
    scene = W.gen_scene(cfg.seed, cfg.world)
    inputs = _inputs(scene, cfg)
    res = bench_forward(model, inputs, n_warmup=args.warmup, n_iters=args.iters)
    out = _out_dir(cfg)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "mean_latency_s", "std_latency_s", "rows_touched", "query_counts"])
        for mode in ("dynamic", "static"):
            r = res[mode]
            w.writerow([mode, f"{r.mean_latency:.6f}", f"{r.std_latency:.6f}", r.rows_touched,
                        " ".join(map(str, r.query_counts))])
    with no_grad():
        traj = forward(model, inputs).trajectory
    _write_trajectory(out / "trajectory.jsonl", traj)
    print(f"dynamic {res['dynamic'].mean_latency * 1e3:.1f} ms  static {res['static'].mean_latency * 1e3:.1f} ms  "
          f"ratio {res['ratio']:.3f}  speedup {res['speedup']:.2f}x")
    return 0


def cmd_verify(args) -> int:
    from . import verify
    names = None
    if args.only:
        names = [n for part in args.only for n in part.split(",") if n]
        unknown = sorted(set(names) - set(verify.CHECKS))
        if unknown:
            raise CLIError(f"unknown checks {unknown}; available: {', '.join(verify.CHECKS)}")
    results = verify.run(names)
    print(verify.format_table(results))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON path or preset name (desk, default)")
    common.add_argument("--seed", type=int)
    common.add_argument("--scenes", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--no-aux", action="store_true", help="drop the reconstruction/prediction losses")
    common.add_argument("--no-dynamic", action="store_true", help="keep the query set static")
    common.add_argument("--transform", choices=sorted(TRANSFORMS))
    common.add_argument("--floor", type=int, help="minimum number of live queries")
    common.add_argument("--force", action="store_true")
    common.add_argument("--deterministic", action="store_true", help="single thread, bitwise reproducible")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory written by gen-data")
    common.add_argument("--checkpoint", help="checkpoint manifest (.json)")

    p = argparse.ArgumentParser(prog="dyss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train a decoder")
    t.add_argument("--resume", help="checkpoint manifest to continue from")
    t.add_argument("--log-every", type=int, default=50)
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    b = sub.add_parser("bench", parents=[common], help="dynamic vs static query latency")
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--warmup", type=int, default=3)
    v = sub.add_parser("verify", parents=[common], help="run the oracle suite")
    v.add_argument("--only", action="append", help="run only these checks (comma separated, repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CLIError, C.ConfigError, ManifestError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"dyss {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
