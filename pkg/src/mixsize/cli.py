"""Command-line entry points: train, eval-sweep, calibrate, analyze-gradients.

Exit codes: 0 success, 2 configuration/usage error, 3 data or checkpoint
error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .analysis import (eval_size_sweep, grad_correlation_experiment, imagenet_sweep_sizes,
                       write_sweep_csv)
from .calib import calibrate, calibration_stream
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, DataSection, RunConfig, apply_override, load_config
from .data import DATA_ENV, DataFormatError, load_cifar10, synth_splits
from .model import ResNetConfig, build_resnet
from .tensor import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CIFAR_SWEEP = [16, 24, 32, 40]

log = logging.getLogger("mixsize")


class UsageError(ValueError):
    pass


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as e:
        raise UsageError(f"expected a comma separated list of integers, got {text!r}") from e


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help=f"CIFAR binary directory (default: ${DATA_ENV})")
    p.add_argument("--subset", type=int, help="stratified training subset size")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic shapes dataset")


def _data_section(args, base: Optional[DataSection] = None) -> DataSection:
    d = base or DataSection()
    if getattr(args, "data", None):
        d.path, d.synthetic = args.data, False
    if getattr(args, "synthetic", False):
        d.synthetic = True
    if getattr(args, "subset", None):
        d.subset = args.subset
    return d


def load_data(d: DataSection, classes: int = 10):
    if d.synthetic:
        return synth_splits(d.subset or d.n_train, d.n_test, classes, seed=d.seed)
    return load_cifar10(d.path or None, subset=d.subset or None, seed=d.seed)


def _section_from_meta(meta: dict) -> DataSection:
    cfg = RunConfig()
    flat = meta.get("config", {})
    for k, v in flat.items():
        if k.startswith("data."):
            setattr(cfg.data, k[5:], v)
    return cfg.data


def _restore_norm(train, test, meta):
    if "norm_mean" in meta:
        train.mean = np.asarray(meta["norm_mean"])
        train.std = np.asarray(meta["norm_std"])
        test.mean, test.std = train.mean, train.std
    return train, test


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    cfg.data = _data_section(args, cfg.data)
    if args.out:
        cfg.run.out_dir = args.out
    from .train import train

    train_set, _ = load_data(cfg.data, cfg.model.classes)
    out = Path(cfg.run.out_dir)
    res = train(cfg, train_set, out)
    print(f"total optimizer steps: {res.total_steps}")
    print(f"steps per epoch: {res.steps_per_epoch[0]} (first), mean batch {res.mean_batch:.2f}, lr {res.lr:.4g}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval_sweep(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    train_set, test_set = _restore_norm(*load_data(_data_section(args, _section_from_meta(meta)),
                                                  model.cfg.num_classes), meta)
    if args.sizes:
        sizes = _int_list(args.sizes)
    elif args.imagenet_sizes:
        sizes = imagenet_sweep_sizes()
    else:
        sizes = CIFAR_SWEEP
    cal = meta.get("mixed", False) if args.calibrate == "auto" else args.calibrate == "on"
    rows = eval_size_sweep(model, test_set, sizes, cal, args.calib_batches, calib_dataset=train_set,
                           calib_batch_size=args.calib_batch_size, seed=args.seed, protocol=args.protocol)
    buf = io.StringIO()
    write_sweep_csv(rows.values(), buf)
    # write only once everything succeeded: no partial CSV on failure
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def calibrated_path(checkpoint: Path, size: int) -> Path:
    return checkpoint.with_name(f"{checkpoint.stem}_calib{size}{checkpoint.suffix}")


def cmd_calibrate(args) -> int:
    ckpt = Path(args.checkpoint)
    model, meta = load_checkpoint(ckpt)
    train_set, _ = _restore_norm(*load_data(_data_section(args, _section_from_meta(meta)), model.cfg.num_classes),
                                 meta)
    stream = calibration_stream(train_set, args.size, args.batch_size, args.seed,
                                augment=not args.no_augment)
    calibrate(model, stream, args.size, args.batches, args.batch_size)
    meta = dict(meta, calibrated_size=args.size, calibration_batches=args.batches)
    out = Path(args.out) if args.out else calibrated_path(ckpt, args.size)
    save_checkpoint(out, model, meta)
    print(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        section = _section_from_meta(meta)
        tag = args.tag or "final"
    else:
        cfg = load_config(args.config, args.set)
        model = build_resnet(ResNetConfig(cfg.model.depth, cfg.model.width, cfg.model.classes),
                             np.random.default_rng([cfg.run.seed, 0]))
        meta, section, tag = {}, cfg.data, args.tag or "initial"
    model.astype(np.float64)
    train_set, _ = _restore_norm(*load_data(_data_section(args, section), model.cfg.num_classes), meta)
    pair = _int_list(args.sizes)
    if len(pair) != 2:
        raise UsageError("--sizes takes exactly two sizes")
    report = grad_correlation_experiment(model, train_set, tuple(pair), args.n_pairs,
                                         np.random.default_rng(args.seed), tag)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["measure", "value", "checkpoint_tag", "n_pairs"])
    w.writeheader()
    w.writerows(report.csv_rows())
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    print(report.summary(), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixsize", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model under a (mixed) size regime")
    t.add_argument("--config", help="flat dotted-key config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", help="output directory (overrides run.out_dir)")
    _add_data_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-sweep", help="accuracy and flops across evaluation sizes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--sizes", help="comma separated sizes (default 16,24,32,40)")
    e.add_argument("--imagenet-sizes", action="store_true", help="use 224 + 32*m, m in -6..6")
    e.add_argument("--calibrate", choices=["auto", "on", "off"], default="auto",
                   help="BN calibration per size (auto: only for mixed-size checkpoints)")
    e.add_argument("--calib-batches", type=int, default=200)
    e.add_argument("--calib-batch-size", type=int, default=64)
    e.add_argument("--protocol", choices=["crop", "resize"], default="resize",
                   help="resize: whole image to SxS (CIFAR-scale); crop: short side to floor(8S/7) then center SxS")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV path (default stdout)")
    _add_data_flags(e)
    e.set_defaults(func=cmd_eval_sweep)

    c = sub.add_parser("calibrate", help="re-estimate BN statistics for one evaluation size")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--size", type=int, required=True)
    c.add_argument("--batches", type=int, default=200)
    c.add_argument("--batch-size", type=int, default=64)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-augment", action="store_true", help="calibrate on plain resized images")
    c.add_argument("--out", help="output checkpoint (default <name>_calib<S>.ckpt)")
    _add_data_flags(c)
    c.set_defaults(func=cmd_calibrate)

    a = sub.add_parser("analyze-gradients", help="gradient correlation / variance across sizes")
    a.add_argument("--checkpoint", help="trained checkpoint (omit to analyse a fresh model)")
    a.add_argument("--config", help="config for a fresh model when no checkpoint is given")
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--sizes", default="32,24")
    a.add_argument("--n-pairs", type=int, default=200)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tag", help="checkpoint tag for the report (initial/partial/final)")
    a.add_argument("--out", help="CSV path (default stdout; summary goes to stderr)")
    _add_data_flags(a)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
