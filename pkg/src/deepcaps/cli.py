"""Command line interface: ``deepcaps <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from deepcaps import harness
from deepcaps.checkpoint import load_checkpoint, model_from_checkpoint
from deepcaps.data import load_dataset, preprocess
from deepcaps.errors import ConfigError
from deepcaps.model import build_model


def _common(p, checkpoint=False, config=False):
    if config:
        p.add_argument("--config", help="run config: JSON file or built-in preset name")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, fixed reduction order")
    p.add_argument("--data-dir", help="dataset directory")
    p.add_argument("--dataset", help="dataset name (mnist, fashion-mnist, cifar10, svhn, npz)")
    p.add_argument("--out-dir", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepcaps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    _common(p, config=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--test-subset", type=int)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    _common(p, checkpoint=True)
    p.add_argument("--test-subset", type=int)

    p = sub.add_parser("ensemble", help="accuracy of averaged capsule norms over several checkpoints")
    _common(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--test-subset", type=int)

    p = sub.add_parser("perturb", help="decode sweeps of one instantiation parameter")
    _common(p, checkpoint=True)
    p.add_argument("--dim", type=int, required=True, help="1-indexed capsule dimension")
    p.add_argument("--range", type=float, nargs=2, default=[-0.075, 0.075], metavar=("LO", "HI"))
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--samples", default="per-class", help="'per-class' or comma-separated indices")
    p.add_argument("--replace", action="store_true", help="set the value instead of adding an offset")
    p.add_argument("--output", help="grid file (.pgm/.ppm), default <out-dir>/perturb_dimNN.pgm")

    p = sub.add_parser("variance", help="rank class-capsule dimensions by variance")
    _common(p, checkpoint=True)
    p.add_argument("--sweeps", type=int, default=0, help="also write sweep grids for the top/bottom K dims")
    p.add_argument("--test-subset", type=int)

    p = sub.add_parser("bench", help="per-image inference latency")
    _common(p, checkpoint=True, config=True)
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1])
    p.add_argument("--iterations", type=int, default=100)

    p = sub.add_parser("inspect", help="parameter count and layer table")
    _common(p, checkpoint=True, config=True)
    return parser


def _run_config(args) -> harness.RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = harness.RunConfig.load(args.config)
    for name in ("seed", "data_dir", "dataset", "out_dir", "epochs", "batch_size", "train_subset", "test_subset"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _need_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return args.checkpoint


def _test_data(args, ckpt):
    """Test split described by the checkpoint's run config, with CLI overrides."""
    cfg = ckpt.config or {}
    name = args.dataset or cfg.get("dataset")
    data_dir = args.data_dir or cfg.get("data_dir")
    if not name or not data_dir:
        raise ConfigError("pass --dataset and --data-dir (the checkpoint does not record them)")
    subset = getattr(args, "test_subset", None) or cfg.get("test_subset")
    ds = load_dataset(name, data_dir, "test").subset(subset, cfg.get("seed", 0))
    return preprocess(ds, cfg.get("resize"))


def cmd_train(args):
    cfg = _run_config(args)
    res = harness.train(cfg)
    print(f"metrics: {res.metrics_path}")
    print(f"last checkpoint: {res.last}")
    print(f"best checkpoint: {res.best}")
    if res.rows:
        print(f"final test accuracy: {res.rows[-1].test_acc:.4f}")


def cmd_eval(args):
    ckpt = load_checkpoint(_need_checkpoint(args))
    with harness.deterministic_threads(args.deterministic):
        res = harness.evaluate(model_from_checkpoint(ckpt), _test_data(args, ckpt))
    print(f"accuracy: {res.accuracy:.6f}")
    print("confusion (rows = true class):")
    for row in res.confusion:
        print(" ".join(f"{v:5d}" for v in row))


def cmd_ensemble(args):
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    with harness.deterministic_threads(args.deterministic):
        res = harness.ensemble_predict(ckpts, _test_data(args, ckpts[0]))
    print(f"members: {len(ckpts)}")
    print(f"accuracy: {res.accuracy:.6f}")


def cmd_perturb(args):
    ckpt = load_checkpoint(_need_checkpoint(args))
    model = model_from_checkpoint(ckpt)
    ds = _test_data(args, ckpt)
    ext = "pgm" if ds.image_shape[-1] == 1 else "ppm"
    out = args.output or f"{args.out_dir or '.'}/perturb_dim{args.dim:02d}.{ext}"
    grid = harness.cmd_perturb(model, ds, args.dim, out, args.range[0], args.range[1], args.steps,
                               args.samples, replace=args.replace)
    print(f"wrote {out} ({grid.shape[1]}x{grid.shape[0]})")


def cmd_variance(args):
    ckpt = load_checkpoint(_need_checkpoint(args))
    model = model_from_checkpoint(ckpt)
    out_dir = args.out_dir or "."
    ranked, grids = harness.cmd_variance(model, _test_data(args, ckpt), out_dir, args.sweeps)
    print(f"wrote {out_dir}/variance.csv ({len(ranked)} dims)")
    for g in grids:
        print(f"wrote {g}")


def _model_for(args):
    if args.checkpoint:
        return model_from_checkpoint(args.checkpoint)
    cfg = _run_config(args)
    return build_model(cfg.arch, cfg.seed)


def cmd_bench(args):
    model = _model_for(args)
    with harness.deterministic_threads(True):
        rows = harness.benchmark_inference(model, args.batch_sizes, args.iterations, seed=args.seed or 0)
    print(json.dumps(rows, indent=2))


def cmd_inspect(args):
    model = _model_for(args)
    width = max(len(name) for name, _, _ in model.layer_table())
    for name, shape, count in model.layer_table():
        print(f"{name:<{width}}  {str(shape):<24} {count:>10,d}")
    print(f"total trainable parameters: {model.num_parameters():,d}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ensemble": cmd_ensemble, "perturb": cmd_perturb,
            "variance": cmd_variance, "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("KeyboardInterrupt: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # one machine-parseable line: "ErrorClass: message"
        msg = str(e).splitlines()[0] if str(e) else ""
        print(f"{type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
