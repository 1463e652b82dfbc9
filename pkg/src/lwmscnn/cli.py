"""Command-line entry point: analyze, split, train, eval, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 gated count mismatch,
64 usage error, 65 dataset/split error, 66 missing input.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import analyzer, data, gradcheck, training
from .errors import ConfigError, DecodeError, IncompatibleWeightsError, SplitError, \
    WeightFormatError
from .io_utils import atomic_write_json, atomic_write_text
from .model import ABLATIONS, ModelConfig, build
from .weights import load_weights

EXIT_OK, EXIT_GRADCHECK, EXIT_GATE = 0, 1, 2
EXIT_USAGE, EXIT_DATA, EXIT_NOINPUT = 64, 65, 66


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _model_args(p):
    p.add_argument("--variant", "--ablation", dest="variant", default="full",
                   help=f"one of {', '.join(ABLATIONS)}")
    p.add_argument("--reduced-geometry", action="store_true",
                   help="small input and widths for fast checks")
    p.add_argument("--bn-momentum", type=float, default=0.99)


def _config(args) -> ModelConfig:
    if args.variant not in ABLATIONS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {', '.join(ABLATIONS)}")
    base = ModelConfig.reduced() if args.reduced_geometry else ModelConfig()
    return base.replace(ablation=args.variant, bn_momentum=args.bn_momentum).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lwmscnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter/FLOP report for a variant")
    _model_args(p)
    p.add_argument("--output-dir", default=".")
    p.add_argument("--gate", action="store_true",
                   help="exit 2 unless params and GFLOPs are within 1%% of the published targets")
    p.add_argument("--mac-flops", type=int, choices=(1, 2), default=2)
    p.add_argument("--no-elementwise", action="store_true",
                   help="count only multiply-accumulates")
    p.add_argument("--bn-stats", action="store_true",
                   help="count BN running statistics as parameters")
    p.add_argument("--reconcile", action="store_true",
                   help="also run the structural search and write its discrepancy report")
    p.add_argument("--accuracy", type=float, default=None,
                   help="accuracy %% used for the efficiency figure")

    p = sub.add_parser("split", help="index a dataset and split it 80:10:10")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--output", default=None, help="index CSV (default OUTPUT_DIR/index.csv)")
    p.add_argument("--output-dir", default=".")
    p.add_argument("--seed", type=int, default=42)

    def data_args(p):
        p.add_argument("--dataset-root", required=True)
        p.add_argument("--index", default=None,
                       help="index CSV from `split`; split on the fly when omitted")
        p.add_argument("--output-dir", default="run")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("train", help="train with early stopping")
    data_args(p)
    _model_args(p)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--max-epochs", "--epochs", dest="epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=8)
    p.add_argument("--shuffle-buffer", type=int, default=3000)

    p = sub.add_parser("eval", help="classification report for a checkpoint")
    data_args(p)
    _model_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-per-tensor", type=int, default=24)
    p.add_argument("--output-dir", default=None)
    return parser


# ---------------------------------------------------------------- commands


def cmd_analyze(args) -> int:
    cfg = _config(args)
    conv = analyzer.Convention(args.mac_flops, not args.no_elementwise, args.bn_stats)
    report = analyzer.analyze(build(cfg, init=False), conv, args.accuracy)
    out = Path(args.output_dir)
    atomic_write_text(out / f"analyze_{args.variant}.txt", report.to_text() + "\n")
    atomic_write_text(out / f"analyze_{args.variant}.json", report.to_json() + "\n")
    print(report.to_text())
    if args.reconcile:
        result = analyzer.reconcile()
        atomic_write_text(out / "reconcile.txt", result.to_text() + "\n")
        atomic_write_json(out / "reconcile.json", result.to_dict())
        print()
        print(result.to_text())
    if args.gate:
        target = "full" if args.variant == "no_augmentation" else args.variant
        if args.reduced_geometry:
            raise UsageError("--gate compares against full-size targets; drop --reduced-geometry")
        want_p, want_g = analyzer.PUBLISHED_PARAMS[target], analyzer.PUBLISHED_GFLOPS[target]
        exact = report.total_params == want_p
        ok_p = abs(report.total_params - want_p) <= 0.01 * want_p
        ok_g = abs(report.gflops - want_g) <= 0.01 * want_g
        verdict = "exact" if exact else "within 1%" if ok_p else "MISMATCH"
        print(f"gate: params {report.total_params:,} vs {want_p:,} {verdict}; "
              f"GFLOPs {report.gflops:.4f} vs {want_g} {'ok' if ok_g else 'MISMATCH'}")
        if not (ok_p and ok_g):
            return EXIT_GATE
    return EXIT_OK


def _counts_table(index: data.DatasetIndex) -> str:
    names = index.class_names
    lines = [f"{'split':<7}" + "".join(f"{n[:22]:>24}" for n in names) + f"{'total':>8}"]
    for s in data.SPLITS:
        c = index.class_counts(s)
        lines.append(f"{s:<7}" + "".join(f"{v:>24}" for v in c) + f"{sum(c):>8}")
    return "\n".join(lines)


def cmd_split(args) -> int:
    index = data.stratified_split(data.scan_dataset(args.dataset_root), seed=args.seed)
    path = Path(args.output) if args.output else Path(args.output_dir) / "index.csv"
    index.to_csv(path)
    print(_counts_table(index))
    print(f"index written to {path}")
    return EXIT_OK


def _load_index(args) -> data.DatasetIndex:
    if args.index:
        if not Path(args.index).is_file():
            raise FileNotFoundError(f"index {args.index} not found")
        return data.DatasetIndex.from_csv(args.index)
    return data.stratified_split(data.scan_dataset(args.dataset_root), seed=args.seed)


def cmd_train(args) -> int:
    cfg = _config(args)
    index = _load_index(args)
    out = Path(args.output_dir)
    size = cfg.input_size[:2]
    cache: dict = {}
    aug = data.AugmentParams() if cfg.uses_augmentation else None
    optimizer = training.Adam(lr=args.learning_rate)
    run_config = {
        "command": "train", "dataset_root": str(args.dataset_root), "index": args.index,
        "seed": args.seed, "batch_size": args.batch_size, "max_epochs": args.epochs,
        "patience": args.patience, "shuffle_buffer": args.shuffle_buffer,
        "reduced_geometry": args.reduced_geometry, "adam": optimizer.config(),
        "augmentation": dataclasses.asdict(aug) if aug else None,
        "model": dataclasses.asdict(cfg),
    }
    atomic_write_json(out / "run_config.json", run_config)
    model = build(cfg, seed=args.seed)

    def train_batches(epoch):
        return data.batch_iterator(index, "train", args.dataset_root, args.batch_size,
                                   args.shuffle_buffer, args.seed, epoch, size, aug, cache)

    def val_batches():
        return data.batch_iterator(index, "val", args.dataset_root, args.batch_size,
                                   image_size=size, augment_params=None, cache=cache)

    def report(r):
        print(f"epoch {r.epoch:3d}  train_loss {r.train_loss:.6f}  train_acc {r.train_acc:.4f}  "
              f"val_loss {r.val_loss:.6f}  val_acc {r.val_acc:.4f}", flush=True)

    log = training.train(model, train_batches, val_batches, args.epochs, args.patience,
                         out / "best.lwms", optimizer, report)
    log.to_csv(out / "train_log.csv")
    print(f"best epoch {log.best_epoch} (val_loss {log.best_val_loss:.6f}); "
          f"checkpoint {out / 'best.lwms'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    cfg = _config(args)
    saved = ckpt.parent / "run_config.json"
    if saved.is_file():
        cfg = ModelConfig(**json.loads(saved.read_text())["model"])
    index = _load_index(args)
    model = load_weights(build(cfg, seed=args.seed, init=False), ckpt)
    batches = data.batch_iterator(index, args.split, args.dataset_root, args.batch_size,
                                  image_size=cfg.input_size[:2], augment_params=None)
    report = training.evaluate(model, batches, index.class_names)
    out = Path(args.output_dir)
    text = report.to_text(f"{args.split} set")
    atomic_write_text(out / "report.txt", text)
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_text(out / "confusion.csv", report.confusion.to_csv_text(index.class_names))
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed, args.max_per_tensor)
    table = gradcheck.format_table(results)
    print(table)
    if args.output_dir:
        atomic_write_text(Path(args.output_dir) / "gradcheck.txt", table + "\n")
    worst = max(results, key=lambda r: r.rel_error)
    if not worst.passed:
        print(f"FAIL: worst offender {worst.name} / {worst.tensor} "
              f"rel error {worst.rel_error:.3e}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks pass (worst {worst.rel_error:.2e} at "
          f"{worst.name} / {worst.tensor})")
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SplitError as exc:
        print(f"split error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DecodeError, WeightFormatError, IncompatibleWeightsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
