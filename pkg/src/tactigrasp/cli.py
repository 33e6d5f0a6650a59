"""``tactigrasp`` command line: data generation, training, evaluation, episodes, benchmarks."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import TactigraspError

log = logging.getLogger("tactigrasp")


def emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def load_overrides(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def apply_overrides(obj, overrides: dict):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ValueError(f"unknown config keys for {type(obj).__name__}: {', '.join(unknown)}")
    return dataclasses.replace(obj, **overrides) if overrides else obj


def model_config(kind: str, preset: str, variant: str | None, overrides: dict):
    from .slip import SlipNetConfig, build_variant
    from .touch import TouchNetConfig

    if kind == "touch":
        if variant:
            raise ValueError("--variant applies to the slip model only")
        cfg = TouchNetConfig.toy() if preset == "toy" else TouchNetConfig.full()
    else:
        cfg = SlipNetConfig.toy() if preset == "toy" else SlipNetConfig()
        if variant:
            v = build_variant(variant)
            cfg = dataclasses.replace(cfg, hidden=v.hidden, heads=v.heads, blocks=v.blocks,
                                      variant=variant)
    return apply_overrides(cfg, overrides)


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> None:
    from .sim import generate_dataset

    t0 = time.perf_counter()
    records = generate_dataset(args.kind, args.out, args.count, args.seed, args.preset)
    labels = [r["label"] for r in records]
    emit({"event": "gen-data", "kind": args.kind, "count": len(records), "out": str(args.out),
          "positives": int(sum(labels)), "seconds": round(time.perf_counter() - t0, 3)})


def cmd_train(args) -> None:
    from .sim import load_dataset
    from .train import Model, evaluate, save_checkpoint, split_indices, train

    x, y, records = load_dataset(args.data)
    kind = args.kind or records[0].get("kind")
    cfg = model_config(kind, args.preset, args.variant, load_overrides(args.config))
    model = Model.create(kind, cfg, seed=args.seed)
    model.check_input(x)
    tr, va = split_indices(len(x), args.val_fraction, args.seed)
    t0 = time.perf_counter()
    result = train(model, x[tr], y[tr], x[va], y[va], epochs=args.epochs,
                   batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
                   seed=args.seed, on_epoch=lambda r: emit({"event": "epoch", **r}))
    metrics = {"init_loss": result.init_loss, "best_epoch": result.best_epoch,
               "best_val_accuracy": result.best_val_accuracy,
               "seconds": round(time.perf_counter() - t0, 3)}
    if len(va):
        metrics["val"] = evaluate(model, x[va], y[va])
    save_checkpoint(args.out, model, metrics)
    emit({"event": "train", "kind": kind, "checkpoint": str(args.out), **metrics})


def cmd_eval(args) -> None:
    from .sim import load_dataset
    from .train import evaluate, load_checkpoint

    model = load_checkpoint(args.checkpoint)
    x, y, _ = load_dataset(args.data)
    emit({"event": "eval", "kind": model.kind, **evaluate(model, x, y)})


def cmd_episode(args) -> None:
    from .control import ControllerConfig, OracleDetectors, Scenario, load_detectors, run_episode
    from .sim import ObjectParams, SimScene

    overrides = load_overrides(args.config)
    scenario = Scenario(args.scenario, **overrides.pop("scenario", {}))
    cfg = apply_overrides(ControllerConfig(), overrides)
    if bool(args.touch_checkpoint) != bool(args.slip_checkpoint):
        raise ValueError("--touch-checkpoint and --slip-checkpoint go together")
    if args.touch_checkpoint:
        detectors = load_detectors(args.touch_checkpoint, args.slip_checkpoint)
    else:
        detectors = OracleDetectors()
    scene = SimScene(obj=ObjectParams(mass=args.mass, friction=args.friction))
    trace = run_episode(scene, detectors, cfg, scenario, seed=args.seed)
    if args.trace:
        trace.to_jsonl(args.trace)
    emit({"event": "episode", "scenario": scenario.kind, **trace.summary()})


def cmd_bench(args) -> None:
    from .slip import PROPOSED, VARIANTS, build_variant, parameter_count
    from .train import Model

    names = args.variants or list(VARIANTS)
    rng = np.random.default_rng(args.seed)
    for name in names:
        v = build_variant(name)
        cfg = model_config("slip", args.preset, name, {})
        model = Model.create("slip", cfg, seed=args.seed)
        x = rng.random((args.batch,) + model.input_shape, dtype=np.float32)
        model.logits_vjp(x)  # warm-up
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            model.logits_vjp(x)
            times.append(time.perf_counter() - t0)
        emit({"event": "bench", "variant": name, "hidden": v.hidden, "heads": v.heads,
              "blocks": v.blocks, "proposed": name in PROPOSED, "preset": args.preset,
              "parameters": parameter_count(cfg), "batch": args.batch,
              "forward_ms_median": round(1e3 * float(np.median(times)), 3),
              "forward_ms_min": round(1e3 * min(times), 3)})


def cmd_export_frames(args) -> None:
    from .sim import export_frames

    n = export_frames(args.data, args.out)
    emit({"event": "export-frames", "frames": n, "out": str(args.out)})


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--preset", choices=("toy", "paper"), default="toy",
                        help="geometry preset (full-size models need several GB of RAM)")
    common.add_argument("--config", type=Path, help="JSON file of config overrides")

    ap = argparse.ArgumentParser(prog="tactigrasp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--kind", choices=("touch", "slip"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--kind", choices=("touch", "slip"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--variant", help="slip ablation row, e.g. AB3-8")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("episode", parents=[common], help="run one simulated grasp")
    p.add_argument("--scenario", choices=("lift", "fluid"), default="lift")
    p.add_argument("--mass", type=float, default=0.2)
    p.add_argument("--friction", type=float, default=0.5)
    p.add_argument("--trace", type=Path)
    p.add_argument("--touch-checkpoint", type=Path)
    p.add_argument("--slip-checkpoint", type=Path)
    p.set_defaults(func=cmd_episode)

    p = sub.add_parser("bench", parents=[common], help="forward latency per slip variant")
    p.add_argument("--variants", nargs="*")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-frames", parents=[common], help="dump dataset frames as PGM")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_frames)
    return ap


def error_category(exc: BaseException) -> str:
    if isinstance(exc, TactigraspError):
        return exc.category
    if isinstance(exc, KeyError):
        return "unknown-key"
    if isinstance(exc, OSError):
        return "io-error"
    return "invalid-argument"


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TACTIGRASP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (TactigraspError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {error_category(e)}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
