"""End-to-end experiment stages: data, training, one-shot sampling, evaluation, verification.

Every report written here is a pure function of the configuration and seed,
so two runs with the same inputs produce byte-identical files.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import ClassData, Dataset, generate_toy_dataset, read_dataset, write_dataset
from .generator import GeneratorParams, forward_batch, train
from .geometry import RandomSource
from .metrics import aggregate, coverage_amr
from .symlab import VerificationReport, verify

log = logging.getLogger("symdrift")

DATASET_FILE = "dataset.txt"
VERIFY_TEXT_FILE = "verification.txt"
VERIFY_KV_FILE = "verification.kv"
METRICS_FILE = "metrics.txt"

# stream keys for RandomSource.spawn, one per consumer of the master seed
SAMPLE_STREAM = 2


def _suffix(name: str) -> str:
    return "" if name == "main" else f"-{name}"


def load_or_generate_dataset(cfg: ExperimentConfig) -> Dataset:
    path = cfg["data.path"]
    if path:
        return read_dataset(path)
    return generate_toy_dataset(cfg.dataset_spec(), RandomSource(cfg.seed))


def train_generator(cfg: ExperimentConfig, ds: Dataset, space: str | None = None, variant: str | None = None) -> GeneratorParams:
    tc = cfg.train_config(space, variant)
    log.info("training %d steps, space=%s", tc.steps, tc.drift.space)
    t0 = time.perf_counter()
    params, losses = train(ds, tc, log_every=cfg["train.log_every"], logger=log)
    if len(losses):
        log.info("trained in %.1f s, final loss %.6g", time.perf_counter() - t0, losses[-1])
    return params


def generate_samples(cfg: ExperimentConfig, params: GeneratorParams, references: Dataset, k: int | None = None) -> Dataset:
    """K = multiplier * L one-shot samples per reference class, stored as a dataset."""
    rng = RandomSource(cfg.seed).spawn(SAMPLE_STREAM)
    mult = cfg["eval.samples_per_class_multiplier"]
    classes = []
    for ref in references.classes:
        if ref.class_id not in params.class_types:
            raise KeyError(f"checkpoint has no class {ref.class_id!r}")
        count = k if k is not None else mult * ref.conformers.shape[0]
        noise = rng.normal((count, ref.n_atoms, 3))
        out, _ = forward_batch(params, noise, [ref.class_id] * count)
        classes.append(ClassData(ref.class_id, ref.types, out))
    return Dataset(classes, {"seed": str(cfg.seed), "kind": "samples"})


def evaluate(cfg: ExperimentConfig, references: Dataset, samples: Dataset) -> dict[str, float]:
    ec = cfg.eval_config()
    per_class = []
    metrics: dict[str, float] = {}
    for ref in references.classes:
        gen = samples.by_id(ref.class_id)
        if gen.types != ref.types:
            raise ValueError(f"class {ref.class_id}: sample types {gen.types} differ from reference {ref.types}")
        m = coverage_amr(gen.conformations(), ref.conformations(), ec)
        per_class.append(m)
        for key, val in m.items():
            metrics[f"class.{ref.class_id}.{key}"] = val
    agg = aggregate(per_class)
    return {**agg, **metrics}


def format_metrics(metrics: dict[str, float]) -> str:
    return "".join(f"{k} {float(v)!r}\n" for k, v in metrics.items())


def parse_metrics(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split()
            out[k] = float(v)
    return out


def check_thresholds(cfg: ExperimentConfig, metrics: dict[str, float]) -> list[str]:
    """Descriptions of every declared threshold that fails (or names a missing metric)."""
    failures = []
    for th in cfg.thresholds:
        if th.metric not in metrics:
            failures.append(f"{th}: metric {th.metric!r} was not produced")
            continue
        try:
            ok = th.holds(metrics[th.metric], metrics)
        except KeyError as exc:
            failures.append(f"{th}: metric {exc.args[0]!r} was not produced")
            continue
        if not ok:
            failures.append(f"{th}: measured {metrics[th.metric]!r}")
    return failures


@dataclass
class RunResult:
    status: int
    metrics: dict[str, float] = field(default_factory=dict)
    verification: VerificationReport | None = None
    failures: list[str] = field(default_factory=list)


def run_pipeline(cfg: ExperimentConfig, out_dir) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = cfg["pipeline.stages"]
    result = RunResult(0)

    ds = None
    if any(s in stages for s in ("gen-data", "train", "sample", "eval")):
        ds = load_or_generate_dataset(cfg)
        if "gen-data" in stages:
            write_dataset(ds, out / DATASET_FILE)

    runs = cfg.ablation_runs()
    for name, space, variant in runs:
        params = None
        if "train" in stages:
            params = train_generator(cfg, ds, space, variant)
            save_checkpoint(params, out / f"model{_suffix(name)}.ckpt")
        if "sample" in stages or "eval" in stages:
            if params is None:
                ckpt = out / f"model{_suffix(name)}.ckpt"
                params = load_checkpoint(ckpt, cfg["train.hidden_widths"], cfg["train.embed_dim"])
            samples = generate_samples(cfg, params, ds)
            if "sample" in stages:
                write_dataset(samples, out / f"samples{_suffix(name)}.txt")
            if "eval" in stages:
                prefix = "" if len(runs) == 1 and name == "main" else f"{name}."
                for k, v in evaluate(cfg, ds, samples).items():
                    result.metrics[prefix + k] = v

    if "verify" in stages:
        report = verify(cfg.verify_config())
        (out / VERIFY_TEXT_FILE).write_text(report.to_text())
        (out / VERIFY_KV_FILE).write_text(report.to_kv())
        result.verification = report
        for c in report.checks:
            result.metrics[f"verify.{c.name}.pass"] = 1.0 if c.passed else 0.0

    if result.metrics:
        (out / METRICS_FILE).write_text(format_metrics(result.metrics))
    result.failures.extend(check_thresholds(cfg, result.metrics))
    result.status = 1 if result.failures else 0
    return result


def run_experiment(config_path, out_dir=None, seed: int | None = None) -> RunResult:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_overrides(seed=int(seed))
    target = Path(out_dir) if out_dir is not None else Path(config_path).with_suffix("").parent / "out"
    return run_pipeline(cfg, target)
