"""Train, evaluate, texture-shift and analyze hybrid depth networks.

Every command prints one JSON line describing its result on stdout. Failures
print ``error: {"type": ..., "message": ...}`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

log = logging.getLogger("hybrid_depth")


def _parse_kv(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    from .config import RunConfig, apply_overrides, desk_preset
    from .pipeline import loss_reduction, train

    config = RunConfig.load(args.config) if args.config else desk_preset()
    flags = {
        "data.train_root": args.data,
        "data.val_root": args.val_data,
        "output_dir": args.output_dir,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "optimizer.lr_depth": args.lr_depth,
        "optimizer.lr_pose": args.lr_pose,
        "encoder.num_layers": args.num_layers,
    }
    overrides = [f"{k}={json.dumps(v)}" for k, v in flags.items() if v is not None]
    config = apply_overrides(config, overrides + list(args.set or []))
    result = train(config)
    summary = {"output_dir": result.output_dir, "checkpoint": result.checkpoints[-1], "steps": len(result.log.steps)}
    if len(result.log.steps) >= 10:
        summary["loss_reduction"] = loss_reduction(result.log)
    _emit(summary)
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate, evaluate_pairs

    median = not args.no_median_scaling
    if args.pred_dir or args.gt_dir:
        if not (args.pred_dir and args.gt_dir):
            raise ValueError("--pred-dir and --gt-dir must be given together")
        kw = {k: v for k, v in (("min_depth", args.min_depth), ("max_depth", args.max_depth)) if v is not None}
        summary, records = evaluate_pairs(args.pred_dir, args.gt_dir, args.out, median, **kw)
    else:
        if not (args.checkpoint and args.data):
            raise ValueError("evaluate needs --checkpoint and --data (or --pred-dir and --gt-dir)")
        crop = tuple(args.crop) if args.crop else None
        summary, records = evaluate(
            args.checkpoint, args.data, args.out, median_scaling=median, dump_depth=not args.no_dump,
            colorize=args.colorize, split=args.split, min_depth=args.min_depth, max_depth=args.max_depth, crop=crop,
        )
    _emit({"metrics": summary.as_row(), "images": len(records), "out": args.out})
    return 0


def cmd_shift(args) -> int:
    from .texture_shift import ShiftSpec, shift_dataset

    manifest = shift_dataset(args.data, ShiftSpec(args.kind, _parse_kv(args.param), args.seed), args.out)
    failed = [e["input"] for e in manifest.failed]
    _emit({"kind": args.kind, "images": len(manifest.entries), "failed": failed, "out": args.out})
    if failed:
        print("error: " + json.dumps({"type": "ShiftFailed", "message": f"{len(failed)} image(s) failed", "files": failed}),
              file=sys.stderr)
        return 1
    return 0


def cmd_analyze(args) -> int:
    from .pipeline import analyze

    report = analyze(
        args.checkpoint, args.original, args.shifted, args.out, batch_size=args.batch_size, pool=args.pool,
        eval_csvs=args.eval_csv, model_names=args.model_name,
    )
    quart = {f"{m}/{s}": q for (m, s), q in report.quartiles().items()}
    _emit({"out": args.out, "rows": len(report.rows()), "quartiles": quart})
    return 0


def cmd_synth(args) -> int:
    from .datasets import SyntheticSceneConfig, TextureSpec, translating_path, write_synthetic_dataset

    config = SyntheticSceneConfig(
        layout=args.layout,
        texture=TextureSpec(args.texture, args.texture_frequency),
        camera_path=translating_path(args.frames, args.step),
        image_size=(args.height, args.width),
        depth_range=tuple(args.depth_range),
        num_boxes=args.num_boxes,
    )
    seq = write_synthetic_dataset(args.out, config, seed=args.seed, name=args.name)
    _emit({"out": args.out, "sequence": seq, "frames": args.frames})
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-depth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="self-supervised training")
    p.add_argument("--config", help="YAML run config (defaults to the desk preset)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. encoder.num_layers=3")
    p.add_argument("--data", help="training dataset root")
    p.add_argument("--val-data", help="dataset with ground truth for per-epoch validation")
    p.add_argument("--output-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-depth", type=float)
    p.add_argument("--lr-pose", type=float)
    p.add_argument("--num-layers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="depth metrics for a checkpoint or for precomputed predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset root with ground-truth depth")
    p.add_argument("--pred-dir", help="directory of predicted depth .npz files")
    p.add_argument("--gt-dir", help="directory of ground-truth depth .npz files")
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--no-median-scaling", action="store_true")
    p.add_argument("--no-dump", action="store_true", help="skip per-image depth dumps")
    p.add_argument("--colorize", action="store_true", help="write colorized depth PNGs")
    p.add_argument("--min-depth", type=float)
    p.add_argument("--max-depth", type=float)
    p.add_argument("--crop", type=int, nargs=4, metavar=("TOP", "BOTTOM", "LEFT", "RIGHT"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("shift", help="write a texture-shifted copy of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=["watercolor", "pencil_sketch", "style_transfer"])
    p.add_argument("--out", required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("analyze", help="CKA between features on original and shifted datasets")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--original", required=True)
    p.add_argument("--shifted", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pool", action="store_true", help="average tokens instead of flattening")
    p.add_argument("--eval-csv", action="append", help="metrics.csv per checkpoint, for the CKA vs error plot")
    p.add_argument("--model-name", action="append")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="render a synthetic translating-camera sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="seq_00")
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--step", type=float, nargs=3, default=[0.05, 0.0, 0.4], metavar=("X", "Y", "Z"))
    p.add_argument("--layout", default="boxes_on_ground", choices=["textured_plane", "boxes_on_ground"])
    p.add_argument("--texture", default="noise", choices=["checker", "noise", "stripes"])
    p.add_argument("--texture-frequency", type=float, default=1.5)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--depth-range", type=float, nargs=2, default=[1.0, 25.0])
    p.add_argument("--num-boxes", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
