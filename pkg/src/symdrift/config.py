"""Flat ``key = value`` experiment configuration with dotted keys.

Blank lines and lines starting with ``#`` are ignored.  Every key must be
known; list values are comma separated.  Thresholds are declared as
``threshold.<metric> = <op> <value>`` with op one of ``<``, ``<=``, ``>``, ``>=``.
"""
from __future__ import annotations

import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .alignment import AlignStrategy
from .data import ToyDatasetSpec
from .drift import DriftConfig
from .errors import InvalidConfigError, SymDriftError
from .generator import TrainConfig
from .metrics import EvalConfig
from .symlab import McConfig, VerifyConfig

STAGES = ("gen-data", "train", "sample", "eval", "verify")
THRESHOLD_OPS: dict[str, Callable[[float, float], bool]] = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _str_list(s: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _range(s: str) -> tuple[int, int]:
    vals = _int_list(s)
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise ValueError(f"expected 'lo,hi', got {s!r}")
    return vals[0], vals[1]


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    "pipeline.stages": (_str_list, STAGES),
    "pipeline.ablation": (_str_list, ()),
    "data.path": (str, ""),
    "data.n_classes": (int, 8),
    "data.atoms_per_class": (_range, (4, 6)),
    "data.n_types": (int, ToyDatasetSpec.n_types),
    "data.conformers_per_class": (_range, (10, 10)),
    "data.sigma_template": (float, 1.0),
    "data.sigma_conf": (float, 0.05),
    "data.orbit_scramble": (_bool, True),
    "data.min_separation": (float, 0.5),
    "train.steps": (int, 2000),
    "train.n_classes_per_step": (int, 8),
    "train.n_pos": (int, 30),
    "train.n_neg": (int, 64),
    "train.learning_rate": (float, 1e-2),
    "train.hidden_widths": (_int_list, (128, 128, 128)),
    "train.embed_dim": (int, 8),
    "train.init_output_scale": (float, 0.1),
    "train.log_every": (int, 0),
    "drift.space": (str, "embedded"),
    "drift.normalization": (str, "one_sided"),
    "drift.temperatures": (_float_list, (0.02, 0.05, 0.2)),
    "drift.temperature_norm": (str, "point"),
    "drift.epsilon": (float, 1e-8),
    "drift.exclude_self": (_bool, True),
    "align.variant": (str, "iterative"),
    "align.max_iterations": (int, 50),
    "align.init_order": (str, "rotation_first"),
    "eval.delta": (float, 0.5),
    "eval.samples_per_class_multiplier": (int, 2),
    "eval.match_permutations": (_bool, False),
    "eval.allow_reflection": (_bool, False),
    "verify.n_group_samples": (int, 20000),
    "verify.tau_schedule": (_float_list, (1.0, 0.3, 0.1, 0.03, 0.01)),
}


@dataclass(frozen=True)
class Threshold:
    """``metric op value``; the value is a number or the name of another metric."""

    metric: str
    op: str
    value: float | str

    def bound(self, metrics: dict) -> float:
        if isinstance(self.value, str):
            if self.value not in metrics:
                raise KeyError(self.value)
            return float(metrics[self.value])
        return self.value

    def holds(self, measured: float, metrics: dict | None = None) -> bool:
        return THRESHOLD_OPS[self.op](measured, self.bound(metrics or {}))

    def __str__(self):
        return f"{self.metric} {self.op} {self.value!r}"


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    thresholds: tuple[Threshold, ...] = ()
    source: str = "<defaults>"

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def with_overrides(self, **overrides) -> ExperimentConfig:
        vals = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise InvalidConfigError(f"unknown config key {key!r}")
            vals[key] = v
        cfg = ExperimentConfig(vals, self.thresholds, self.source)
        cfg.validate()
        return cfg

    # typed views -------------------------------------------------------
    def dataset_spec(self) -> ToyDatasetSpec:
        v = self.values
        return _build(
            "data",
            lambda: ToyDatasetSpec(
                n_classes=v["data.n_classes"],
                atoms_per_class=v["data.atoms_per_class"],
                n_types=v["data.n_types"],
                conformers_per_class=v["data.conformers_per_class"],
                sigma_template=v["data.sigma_template"],
                sigma_conf=v["data.sigma_conf"],
                orbit_scramble=v["data.orbit_scramble"],
                min_separation=v["data.min_separation"],
            ),
        )

    def align_strategy(self, variant: str | None = None) -> AlignStrategy:
        v = self.values
        return _build(
            "align",
            lambda: AlignStrategy(variant or v["align.variant"], v["align.max_iterations"], v["align.init_order"]),
        )

    def drift_config(self, space: str | None = None, variant: str | None = None) -> DriftConfig:
        v = self.values
        strategy = self.align_strategy(variant)
        return _build(
            "drift",
            lambda: DriftConfig(
                temperatures=v["drift.temperatures"],
                normalization=v["drift.normalization"],
                space=space or v["drift.space"],
                align_strategy=strategy,
                per_temperature_norm_epsilon=v["drift.epsilon"],
                temperature_norm=v["drift.temperature_norm"],
                exclude_self=v["drift.exclude_self"],
            ),
        )

    def train_config(self, space: str | None = None, variant: str | None = None) -> TrainConfig:
        v = self.values
        drift = self.drift_config(space, variant)
        return _build(
            "train",
            lambda: TrainConfig(
                n_classes_per_step=v["train.n_classes_per_step"],
                n_pos=v["train.n_pos"],
                n_neg=v["train.n_neg"],
                learning_rate=v["train.learning_rate"],
                steps=v["train.steps"],
                seed=self.seed,
                drift=drift,
                hidden_widths=v["train.hidden_widths"],
                embed_dim=v["train.embed_dim"],
                init_output_scale=v["train.init_output_scale"],
            ),
        )

    def eval_config(self) -> EvalConfig:
        v = self.values
        return _build(
            "eval",
            lambda: EvalConfig(
                delta=v["eval.delta"],
                samples_per_class_multiplier=v["eval.samples_per_class_multiplier"],
                match_permutations=v["eval.match_permutations"],
                allow_reflection=v["eval.allow_reflection"],
            ),
        )

    def verify_config(self) -> VerifyConfig:
        v = self.values
        mc = _build(
            "verify",
            lambda: McConfig(n_group_samples=v["verify.n_group_samples"], seed=self.seed, tau_schedule=v["verify.tau_schedule"]),
        )
        return VerifyConfig(mc=mc)

    def ablation_runs(self) -> list[tuple[str, str, str | None]]:
        """(run name, drift space, alignment variant) for each ablation entry, or the single configured run."""
        entries = self.values["pipeline.ablation"]
        if not entries:
            return [("main", self.values["drift.space"], None)]
        runs = []
        for entry in entries:
            space, _, variant = entry.partition(":")
            name = space if not variant else f"{space}_{variant}"
            runs.append((name, space, variant or None))
        return runs

    def validate(self) -> None:
        self.dataset_spec()
        for _, space, variant in self.ablation_runs():
            self.train_config(space, variant)
        self.eval_config()
        self.verify_config()
        for stage in self.values["pipeline.stages"]:
            if stage not in STAGES:
                raise InvalidConfigError(f"config key 'pipeline.stages': unknown stage {stage!r}; expected {STAGES}")


_SECTION_KEYS = {
    "data": "data.",
    "align": "align.",
    "drift": "drift.",
    "train": "train.",
    "eval": "eval.",
    "verify": "verify.",
}

# message fragments that identify the offending key inside a section
_HINTS = {
    "space": "drift.space",
    "normalization": "drift.normalization",
    "per_temperature_norm_epsilon": "drift.epsilon",
    "temperature_norm": "drift.temperature_norm",
    "temperatures": "drift.temperatures",
    "variant": "align.variant",
    "init_order": "align.init_order",
    "max_iterations": "align.max_iterations",
    "n_neg": "train.n_neg",
    "learning_rate": "train.learning_rate",
    "steps": "train.steps",
    "delta": "eval.delta",
    "samples_per_class_multiplier": "eval.samples_per_class_multiplier",
    "n_group_samples": "verify.n_group_samples",
    "tau_schedule": "verify.tau_schedule",
}


def _build(section: str, fn):
    try:
        return fn()
    except SymDriftError as exc:
        msg = str(exc)
        key = next((k for frag, k in _HINTS.items() if k.startswith(section + ".") and frag in msg), None)
        where = f"config key {key!r}" if key else f"config section {section!r}"
        raise InvalidConfigError(f"{where}: {msg}") from None


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    thresholds = []
    seen = set()
    for ln, raw in enumerate(text.splitlines(), start=1):
        # no value contains '#', so everything after it is a comment
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise InvalidConfigError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        if key in seen:
            raise InvalidConfigError(f"{source}:{ln}: duplicate config key {key!r}")
        seen.add(key)
        if key.startswith("threshold."):
            metric = key[len("threshold.") :]
            op, _, rhs = val.partition(" ")
            rhs = rhs.strip()
            if op not in THRESHOLD_OPS or not metric or not rhs:
                raise InvalidConfigError(
                    f"{source}:{ln}: config key {key!r}: expected '<op> <number or metric>' with op in {tuple(THRESHOLD_OPS)}"
                )
            try:
                bound: float | str = float(rhs)
            except ValueError:
                bound = rhs
            thresholds.append(Threshold(metric, op, bound))
            continue
        if key not in SCHEMA:
            raise InvalidConfigError(f"{source}:{ln}: unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise InvalidConfigError(f"{source}:{ln}: config key {key!r}: {exc}") from None
    cfg = ExperimentConfig(values, tuple(thresholds), source)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p))
