"""Command-line entry point: ``symdrift <subcommand> [--config F] [--seed S] [--out-dir D]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import default_config, load_config
from .data import read_dataset, write_dataset
from .errors import SymDriftError
from .pipeline import (
    DATASET_FILE,
    METRICS_FILE,
    VERIFY_KV_FILE,
    VERIFY_TEXT_FILE,
    check_thresholds,
    evaluate,
    format_metrics,
    generate_samples,
    load_or_generate_dataset,
    run_pipeline,
    train_generator,
)
from .symlab import verify

log = logging.getLogger("symdrift")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out-dir", type=Path, default=Path("out"), help="directory for outputs (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symdrift", description="Symmetry-aware drifting models on typed point clouds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the configured toy dataset")
    _common(p)

    p = sub.add_parser("train", help="train a generator and write a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset file (default: generate from the config)")

    p = sub.add_parser("sample", help="draw one-shot samples from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="reference dataset fixing classes and the K = multiplier * L sample counts")
    p.add_argument("--k", type=int, help="samples per class instead of multiplier * L")

    p = sub.add_parser("eval", help="score samples against references")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="reference dataset")
    p.add_argument("--samples", type=Path, required=True, help="samples file written by 'sample'")

    p = sub.add_parser("verify", help="run the symmetry verification suite")
    _common(p)

    p = sub.add_parser("run", help="run the pipeline declared in the config")
    _common(p)
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "data", None) is not None:
        cfg = cfg.with_overrides(**{"data.path": str(args.data)})
    return cfg


def _finish(cfg, metrics: dict, out: Path) -> int:
    (out / METRICS_FILE).write_text(format_metrics(metrics))
    failures = check_thresholds(cfg, metrics)
    for f in failures:
        print(f"threshold failed: {f}", file=sys.stderr)
    return 1 if failures else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _load(args)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            result = run_pipeline(cfg, out)
            for f in result.failures:
                print(f"threshold failed: {f}", file=sys.stderr)
            sys.stdout.write(format_metrics(result.metrics))
            return result.status
        if args.command == "gen-data":
            ds = load_or_generate_dataset(cfg)
            write_dataset(ds, out / DATASET_FILE)
            print(out / DATASET_FILE)
            return 0
        if args.command == "train":
            ds = load_or_generate_dataset(cfg)
            params = train_generator(cfg, ds)
            save_checkpoint(params, out / "model.ckpt")
            print(out / "model.ckpt")
            return 0
        if args.command == "sample":
            params = load_checkpoint(args.checkpoint, cfg["train.hidden_widths"], cfg["train.embed_dim"])
            refs = load_or_generate_dataset(cfg)
            samples = generate_samples(cfg, params, refs, args.k)
            write_dataset(samples, out / "samples.txt")
            print(out / "samples.txt")
            return 0
        if args.command == "eval":
            metrics = evaluate(cfg, read_dataset(args.data), read_dataset(args.samples))
            sys.stdout.write(format_metrics(metrics))
            return _finish(cfg, metrics, out)
        if args.command == "verify":
            report = verify(cfg.verify_config())
            (out / VERIFY_TEXT_FILE).write_text(report.to_text())
            (out / VERIFY_KV_FILE).write_text(report.to_kv())
            sys.stdout.write(report.to_text())
            metrics = {f"verify.{c.name}.pass": 1.0 if c.passed else 0.0 for c in report.checks}
            failures = check_thresholds(cfg, metrics)
            for f in failures:
                print(f"threshold failed: {f}", file=sys.stderr)
            return 1 if failures or not report.passed else 0
    except (SymDriftError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
