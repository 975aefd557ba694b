"""Command-line interface.

Subcommands: generate-data, train, eval, infer, benchmark. Exit codes:
0 success, 1 user error (bad arguments, missing files), 2 runtime failure.
"""

import argparse
import dataclasses
import sys
import traceback
from pathlib import Path


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def build_parser():
    parser = _Parser(prog="cirrusseg",
                     description="Gridded multi-scale tri-attention segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="generate a synthetic cirrus dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--num", type=int, default=300, help="number of samples")
    gen.add_argument("--size", type=int, default=512, help="image side in pixels")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--prevalence", type=float, default=0.25,
                     help="fraction of images containing cirrus")
    gen.add_argument("--coverage", type=float, default=0.6,
                     help="target positive-pixel fraction in contaminated images")
    gen.add_argument("--split", type=float, nargs=3, default=(0.7, 0.15, 0.15),
                     metavar=("TRAIN", "VAL", "TEST"))

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", help="plain-text config file (key = value)")
    tr.add_argument("--data-dir")
    tr.add_argument("--run-dir")
    tr.add_argument("--model", choices=["full", "control"])
    tr.add_argument("--loss", choices=["sml", "focal_rounded"])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--image-size", type=lambda v: None if v.lower() == "none" else int(v))
    tr.add_argument("--width", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--tile-batch", type=int)
    tr.add_argument("--device")
    tr.add_argument("--ensemble", type=int, default=0,
                    help="train N ensemble members instead of a single model")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--data-dir")
    ev.add_argument("--out", help="write the per-image CSV report here")

    inf = sub.add_parser("infer", help="segment images with one or more checkpoints")
    inf.add_argument("--checkpoint", action="append", required=True,
                     help="checkpoint path; repeat for an ensemble")
    inf.add_argument("--image", action="append", required=True,
                     help="input image (.png/.npy/.npz); repeatable")
    inf.add_argument("--out", required=True, help="output directory")
    inf.add_argument("--threshold", type=float, default=0.5)
    inf.add_argument("--overlay", action="store_true",
                     help="also write an input/probability/mask overlay figure")

    bench = sub.add_parser("benchmark", help="report gridded-attention memory cost")
    bench.add_argument("--side", type=int, default=64, help="full-scale map side")
    bench.add_argument("--scales", default="1,0.5,0.25")
    bench.add_argument("--tile-size", type=int, default=16)
    bench.add_argument("--out", help="CSV output path (default: stdout)")
    bench.add_argument("--no-measure", action="store_true",
                       help="skip the instrumented forward pass")
    return parser


def _cmd_generate_data(args):
    from .data import make_dataset
    from .synth import CirrusParams

    params = CirrusParams(size=args.size, prevalence=args.prevalence,
                          coverage=args.coverage)
    manifest = make_dataset(args.num, args.out, split=tuple(args.split),
                            params=params, base_seed=args.seed)
    print(f"wrote {args.num} samples; manifest: {manifest}")


def _cmd_train(args):
    from . import train as tr

    overrides = {}
    mapping = {
        "data_dir": args.data_dir, "run_dir": args.run_dir, "model": args.model,
        "loss": args.loss, "epochs": args.epochs, "batch_size": args.batch_size,
        "image_size": args.image_size, "width": args.width, "seed": args.seed,
        "tile_batch": args.tile_batch, "device": args.device,
    }
    for key, value in mapping.items():
        if value is not None:
            overrides[key] = value
    if args.config:
        if not Path(args.config).exists():
            raise UserError(f"config file not found: {args.config}")
        config = tr.load_config(args.config, **overrides)
    else:
        config = tr.TrainConfig(**overrides)
    if not Path(config.data_dir).exists():
        raise UserError(f"dataset directory not found: {config.data_dir}")
    if args.ensemble:
        results = tr.train_ensemble(config, size=args.ensemble)
        for k, result in enumerate(results):
            print(f"member {k}: best val IoU {result.best_val_iou:.4f} "
                  f"(epoch {result.best_epoch}) -> {result.best_path}")
    else:
        result = tr.train(config)
        print(f"best val IoU {result.best_val_iou:.4f} at epoch {result.best_epoch}")
        print(f"checkpoints: {result.best_path} , {result.last_path}")


def _cmd_eval(args):
    from .train import evaluate, write_report_csv

    if not Path(args.checkpoint).exists():
        raise UserError(f"checkpoint not found: {args.checkpoint}")
    rows, summary = evaluate(args.checkpoint, split=args.split,
                             data_dir=args.data_dir)
    for row in rows:
        print(f"{row['image_id']}  iou {row['iou']:.4f}  dice {row['dice']:.4f}  "
              f"cov_pred {row['coverage_pred']:.4f}  cov_target {row['coverage_target']:.4f}")
    print(f"split={summary['split']} n={summary['n']} "
          f"mean_iou={summary['mean_iou']:.4f} mean_dice={summary['mean_dice']:.4f} "
          f"coverage_kl={summary['coverage_kl']:.4f}")
    if args.out:
        write_report_csv(args.out, rows)
        print(f"report written to {args.out}")


def _cmd_infer(args):
    from .train import infer

    for path in args.checkpoint + args.image:
        if not Path(path).exists():
            raise UserError(f"file not found: {path}")
    written = infer(args.checkpoint, args.image, args.out,
                    threshold=args.threshold, overlay=args.overlay)
    for path in written:
        print(path)


def _cmd_benchmark(args):
    import sys as _sys

    from .train import benchmark, write_benchmark_csv

    try:
        scales = tuple(float(s) for s in args.scales.split(","))
    except ValueError as exc:
        raise UserError(f"bad --scales value {args.scales!r}: {exc}")
    row = benchmark(args.side, scales=scales, tile_size=args.tile_size,
                    measure=not args.no_measure)
    write_benchmark_csv(args.out if args.out else _sys.stdout, [row])
    if args.out:
        print(f"benchmark written to {args.out}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "generate-data": _cmd_generate_data,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "infer": _cmd_infer,
            "benchmark": _cmd_benchmark,
        }[args.command]
        handler(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
