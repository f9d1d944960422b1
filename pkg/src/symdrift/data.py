"""Synthetic typed-point-cloud datasets and their line-oriented text format.

File layout::

    SYMDRIFT-DS v1
    META <key> <value>          (zero or more)
    CLASS <id> <N> <n_conformers>
    <N type integers>
    CONF <index>
    x y z                       (N lines, 17 significant digits)
    ...
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, InvalidConfigError, ParseError
from .geometry import (
    Conformation,
    RandomSource,
    center_coords,
    sample_haar_rotation,
    sample_type_permutation,
)

DATASET_HEADER = "SYMDRIFT-DS v1"


@dataclass(eq=False)
class ClassData:
    class_id: str
    types: tuple[int, ...]
    conformers: np.ndarray  # (M, N, 3)

    def __post_init__(self):
        self.class_id = str(self.class_id)
        if any(ch.isspace() for ch in self.class_id) or not self.class_id:
            raise DataError(f"class id {self.class_id!r} must be a non-empty token without whitespace")
        self.types = tuple(int(t) for t in self.types)
        conf = np.asarray(self.conformers, dtype=np.float64)
        if conf.ndim != 3 or conf.shape[1:] != (len(self.types), 3):
            raise DataError(f"class {self.class_id}: conformers shape {conf.shape} does not match {len(self.types)} atoms")
        if conf.shape[0] < 1:
            raise DataError(f"class {self.class_id} has no conformers")
        if not np.all(np.isfinite(conf)):
            raise DataError(f"class {self.class_id}: non-finite coordinates")
        self.conformers = conf

    @property
    def n_atoms(self) -> int:
        return len(self.types)

    def conformations(self) -> list[Conformation]:
        return [Conformation(c, self.types, self.class_id) for c in self.conformers]


@dataclass(eq=False)
class Dataset:
    classes: list[ClassData]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate class ids")

    def by_id(self, class_id) -> ClassData:
        for c in self.classes:
            if c.class_id == str(class_id):
                return c
        raise KeyError(class_id)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.metadata != other.metadata or len(self.classes) != len(other.classes):
            return False
        return all(
            a.class_id == b.class_id and a.types == b.types and np.array_equal(a.conformers, b.conformers)
            for a, b in zip(self.classes, other.classes)
        )


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_classes: int = 8
    atoms_per_class: tuple[int, int] = (4, 6)
    n_types: int = 3
    conformers_per_class: tuple[int, int] = (10, 10)
    sigma_template: float = 1.0
    sigma_conf: float = 0.05
    orbit_scramble: bool = True
    # templates whose closest atom pair is nearer than this are redrawn
    min_separation: float = 0.5

    def __post_init__(self):
        lo, hi = self.atoms_per_class
        clo, chi = self.conformers_per_class
        if self.n_classes < 1 or lo < 1 or hi < lo or clo < 1 or chi < clo or self.n_types < 1:
            raise InvalidConfigError("dataset counts must be >= 1 and ranges ordered")
        if self.sigma_template < 0 or self.sigma_conf < 0:
            raise InvalidConfigError("sigma values must be non-negative")


def _template(rng: RandomSource, n: int, spec: ToyDatasetSpec) -> np.ndarray:
    for _ in range(1000):
        t = center_coords(spec.sigma_template * rng.normal((n, 3)))
        if n == 1:
            return t
        d = np.linalg.norm(t[:, None] - t[None], axis=-1)
        if d[np.triu_indices(n, 1)].min() >= spec.min_separation * spec.sigma_template:
            return t
    return t


def generate_toy_dataset(spec: ToyDatasetSpec, rng: RandomSource) -> Dataset:
    classes = []
    lo, hi = spec.atoms_per_class
    clo, chi = spec.conformers_per_class
    for c in range(spec.n_classes):
        n = int(rng.integers(lo, hi + 1))
        m = int(rng.integers(clo, chi + 1))
        types = tuple(int(t) for t in np.sort(rng.integers(0, spec.n_types, size=n)))
        template = _template(rng, n, spec)
        confs = []
        for _ in range(m):
            x = template + spec.sigma_conf * rng.normal((n, 3))
            if spec.orbit_scramble:
                rot = sample_haar_rotation(rng)
                perm = sample_type_permutation(rng, types)
                x = x[perm] @ rot.T
            confs.append(center_coords(x))
        classes.append(ClassData(f"c{c}", types, np.stack(confs)))
    meta = {
        "seed": str(rng.seed),
        "n_classes": str(spec.n_classes),
        "atoms_per_class": f"{lo},{hi}",
        "n_types": str(spec.n_types),
        "conformers_per_class": f"{clo},{chi}",
        "sigma_template": repr(float(spec.sigma_template)),
        "sigma_conf": repr(float(spec.sigma_conf)),
        "orbit_scramble": str(bool(spec.orbit_scramble)).lower(),
    }
    return Dataset(classes, meta)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(ds: Dataset, path) -> None:
    lines = [DATASET_HEADER]
    for k, v in ds.metadata.items():
        if any(ch.isspace() for ch in str(k)) or "\n" in str(v):
            raise DataError(f"metadata key {k!r} must be a single token and value a single line")
        lines.append(f"META {k} {v}")
    for c in ds.classes:
        lines.append(f"CLASS {c.class_id} {c.n_atoms} {c.conformers.shape[0]}")
        lines.append(" ".join(str(t) for t in c.types))
        for i, conf in enumerate(c.conformers):
            lines.append(f"CONF {i}")
            lines.extend(" ".join(_fmt(v) for v in row) for row in conf)
    Path(path).write_text("\n".join(lines) + "\n")


class _Lines:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {what}", line=self.pos + 1, field=what)
        self.pos += 1
        return self.pos, self.lines[self.pos - 1].split()

    def done(self) -> bool:
        return self.pos >= len(self.lines)


def _int(tok: str, line: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"expected integer, got {tok!r}", line=line, field=what) from None


def _float(tok: str, line: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"expected number, got {tok!r}", line=line, field=what) from None


def read_dataset(path) -> Dataset:
    src = _Lines(Path(path).read_text())
    ln, toks = src.next("header")
    if " ".join(toks) != DATASET_HEADER:
        raise ParseError(f"bad header {' '.join(toks)!r}, expected {DATASET_HEADER!r}", line=ln, field="header")
    meta: dict[str, str] = {}
    classes = []
    while not src.done():
        ln, toks = src.next("CLASS")
        if not toks:
            continue
        if toks[0] == "META":
            if len(toks) < 2:
                raise ParseError("META needs a key", line=ln, field="META")
            meta[toks[1]] = src.lines[ln - 1].split(None, 2)[2] if len(toks) > 2 else ""
            continue
        if toks[0] != "CLASS" or len(toks) != 4:
            raise ParseError(f"expected 'CLASS <id> <N> <n_conformers>', got {' '.join(toks)!r}", line=ln, field="CLASS")
        cid = toks[1]
        n = _int(toks[2], ln, "N")
        m = _int(toks[3], ln, "n_conformers")
        if n < 1 or m < 1:
            raise ParseError("N and n_conformers must be >= 1", line=ln, field="CLASS")
        ln, toks = src.next("types")
        if len(toks) != n:
            raise ParseError(f"expected {n} types, got {len(toks)}", line=ln, field="types")
        types = tuple(_int(t, ln, "types") for t in toks)
        confs = np.empty((m, n, 3))
        for i in range(m):
            ln, toks = src.next("CONF")
            if len(toks) != 2 or toks[0] != "CONF" or _int(toks[1], ln, "CONF") != i:
                raise ParseError(f"expected 'CONF {i}', got {' '.join(toks)!r}", line=ln, field="CONF")
            for a in range(n):
                ln, toks = src.next("coordinates")
                if len(toks) != 3:
                    raise ParseError(f"expected 3 coordinates, got {len(toks)}", line=ln, field="coordinates")
                confs[i, a] = [_float(t, ln, "coordinates") for t in toks]
        try:
            classes.append(ClassData(cid, types, confs))
        except DataError as exc:
            raise ParseError(str(exc), line=ln, field="CLASS") from None
    return Dataset(classes, meta)
