"""Structure-comparison metrics: Kabsch RMSD, distance MAE, coverage and AMR."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alignment import AlignStrategy, align_batch, kabsch_batch
from .errors import ComplexityGuardError, InvalidConfigError, InvalidInputError, ShapeError
from .geometry import Conformation, center_coords


@dataclass(frozen=True)
class EvalConfig:
    delta: float = 0.5
    samples_per_class_multiplier: int = 2
    # also minimise RMSD over type-preserving atom permutations
    match_permutations: bool = False
    # also minimise over improper rotations (mirror images)
    allow_reflection: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidConfigError("delta must be positive")
        if self.samples_per_class_multiplier < 1:
            raise InvalidConfigError("samples_per_class_multiplier must be >= 1")


def _coords(c) -> np.ndarray:
    return c.coords if isinstance(c, Conformation) else np.asarray(c, dtype=np.float64)


def rmsd_aligned(x1, x2) -> float:
    """RMSD after optimally rotating x2 onto x1 with fixed atom correspondence."""
    a, b = _coords(x1), _coords(x2)
    if a.shape != b.shape:
        raise ShapeError(f"atom counts differ: {a.shape} vs {b.shape}")
    return float(rmsd_table(a[None], b[None])[0, 0])


def rmsd_table(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """(K, L) matrix of index-matched Kabsch RMSDs between (K, N, 3) and (L, N, 3) stacks."""
    xs = center_coords(np.asarray(xs, dtype=np.float64))
    ys = center_coords(np.asarray(ys, dtype=np.float64))
    k, n, _ = xs.shape
    l = ys.shape[0]
    xr = np.repeat(xs, l, axis=0)
    yr = np.tile(ys, (k, 1, 1))
    rot = kabsch_batch(xr, yr)
    d = xr - yr @ np.swapaxes(rot, -1, -2)
    return np.sqrt(np.einsum("bij,bij->b", d, d) / n).reshape(k, l)


def permutation_rmsd_table(xs: np.ndarray, ys: np.ndarray, types: Sequence[int]) -> np.ndarray:
    """Like :func:`rmsd_table` but minimised over type-preserving permutations of the second argument.

    Exhaustive when the permutation group is small enough, iterative alignment otherwise.
    """
    xs = center_coords(np.asarray(xs, dtype=np.float64))
    ys = center_coords(np.asarray(ys, dtype=np.float64))
    k, n, _ = xs.shape
    l = ys.shape[0]
    xr = np.repeat(xs, l, axis=0)
    yr = np.tile(ys, (k, 1, 1))
    try:
        _, _, res, _ = align_batch(xr, yr, types, AlignStrategy("brute_force"))
    except ComplexityGuardError:
        _, _, res, _ = align_batch(xr, yr, types, AlignStrategy("iterative"))
    return (res / np.sqrt(n)).reshape(k, l)


def dmae(x1, x2) -> float:
    """Mean absolute difference of inter-atomic distances over ordered pairs i != j."""
    a, b = _coords(x1), _coords(x2)
    if a.shape != b.shape:
        raise ShapeError(f"atom counts differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise InvalidInputError("DMAE needs at least two atoms")
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    return float(np.abs(da - db).sum() / (n * (n - 1)))


def coverage_amr_from_table(table: np.ndarray, delta: float) -> dict[str, float]:
    """Metrics from a (K generated, L reference) RMSD table."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.size == 0:
        raise InvalidInputError("RMSD table must be a non-empty matrix")
    min_over_gen = t.min(axis=0)  # per reference
    min_over_ref = t.min(axis=1)  # per generated
    return {
        "cov_r": float(np.mean(min_over_gen < delta)),
        "amr_r": float(np.mean(min_over_gen)),
        "cov_p": float(np.mean(min_over_ref < delta)),
        "amr_p": float(np.mean(min_over_ref)),
    }


def coverage_amr(generated: Sequence, references: Sequence, config: EvalConfig | None = None) -> dict[str, float]:
    config = config or EvalConfig()
    if len(generated) == 0 or len(references) == 0:
        raise InvalidInputError("generated and reference sets must be non-empty")
    gen = np.stack([_coords(c) for c in generated])
    ref = np.stack([_coords(c) for c in references])
    if gen.shape[1:] != ref.shape[1:]:
        raise ShapeError("generated and reference structures differ in atom count")
    if config.match_permutations:
        types = _types_of(generated, references)
        table = permutation_rmsd_table(gen, ref, types)
    else:
        table = rmsd_table(gen, ref)
    if config.allow_reflection:
        mirrored = ref * np.array([1.0, 1.0, -1.0])
        alt = permutation_rmsd_table(gen, mirrored, types) if config.match_permutations else rmsd_table(gen, mirrored)
        table = np.minimum(table, alt)
    return coverage_amr_from_table(table, config.delta)


def _types_of(generated, references) -> tuple[int, ...]:
    for c in list(generated) + list(references):
        if isinstance(c, Conformation):
            types = c.types
            break
    else:
        raise InvalidInputError("permutation matching needs Conformation inputs carrying atom types")
    for c in list(generated) + list(references):
        if isinstance(c, Conformation) and c.types != types:
            raise InvalidInputError("all structures must share one type sequence")
    return types


def aggregate(per_class: Sequence[dict[str, float]]) -> dict[str, float]:
    """Mean and median of each per-class metric."""
    keys = per_class[0].keys()
    out = {}
    for key in keys:
        vals = np.array([m[key] for m in per_class])
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_median"] = float(np.median(vals))
    return out
