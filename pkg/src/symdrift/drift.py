"""Kernel drifting field over mini-batches.

Laplacian kernel weights with one- or two-sided softmax normalisation,
attraction to data minus repulsion from generated samples, and the
per-temperature normalised multi-temperature combination.  A batch can be
built in raw coordinates, with targets aligned to each query, or in the
invariant embedding space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alignment import AlignStrategy, aligned_target_sets
from .embedding import embed_batch, embed_pullback_batch
from .errors import InvalidConfigError, InvalidInputError, ShapeError
from .geometry import Conformation, center_coords

NORMALIZATIONS = ("one_sided", "two_sided")
SPACES = ("cartesian", "aligned", "embedded")
TEMPERATURE_NORMS = ("point", "none")


@dataclass(frozen=True)
class DriftConfig:
    temperatures: tuple[float, ...] = (0.02, 0.05, 0.2)
    normalization: str = "one_sided"
    space: str = "embedded"
    align_strategy: AlignStrategy = field(default_factory=AlignStrategy)
    per_temperature_norm_epsilon: float = 1e-8
    temperature_norm: str = "point"
    # drop each generated sample from its own negative set
    exclude_self: bool = True

    def __post_init__(self):
        temps = tuple(float(t) for t in self.temperatures)
        if not temps or any(not np.isfinite(t) or t <= 0 for t in temps):
            raise InvalidConfigError("temperatures must be a non-empty list of positive reals")
        object.__setattr__(self, "temperatures", temps)
        if self.normalization not in NORMALIZATIONS:
            raise InvalidConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.space not in SPACES:
            raise InvalidConfigError(f"space must be one of {SPACES}, got {self.space!r}")
        if self.temperature_norm not in TEMPERATURE_NORMS:
            raise InvalidConfigError(f"temperature_norm must be one of {TEMPERATURE_NORMS}")
        if not self.per_temperature_norm_epsilon > 0:
            raise InvalidConfigError("per_temperature_norm_epsilon must be positive")


@dataclass(frozen=True, eq=False)
class DriftBatch:
    """Queries u_i with positive and negative targets.

    Targets are either shared, shape (J, D), or per query, shape (P, J, D).
    ``neg_mask[i, k]`` marks negative k as excluded for query i.
    """

    points: np.ndarray
    pos_targets: np.ndarray
    neg_targets: np.ndarray
    neg_mask: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        pos = np.asarray(self.pos_targets, dtype=np.float64)
        neg = np.asarray(self.neg_targets, dtype=np.float64)
        p, d = pts.shape
        if neg.size == 0:
            neg = np.zeros((0, d))
        for name, t in (("pos_targets", pos), ("neg_targets", neg)):
            if t.ndim not in (2, 3) or t.shape[-1] != d or (t.ndim == 3 and t.shape[0] != p):
                raise ShapeError(f"{name} shape {t.shape} incompatible with points {pts.shape}")
        if pos.shape[-2] < 1:
            raise InvalidInputError("at least one positive target is required")
        if self.neg_mask is not None:
            mask = np.asarray(self.neg_mask, dtype=bool)
            if mask.shape != (p, neg.shape[-2]):
                raise ShapeError(f"neg_mask shape {mask.shape} != {(p, neg.shape[-2])}")
            object.__setattr__(self, "neg_mask", mask)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "pos_targets", pos)
        object.__setattr__(self, "neg_targets", neg)

    @property
    def n_pos(self) -> int:
        return self.pos_targets.shape[-2]

    @property
    def n_neg(self) -> int:
        return self.neg_targets.shape[-2]


def _pairwise_distances(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if targets.ndim == 2:
        diff = points[:, None, :] - targets[None, :, :]
    else:
        diff = points[:, None, :] - targets
    return np.sqrt(np.einsum("pjd,pjd->pj", diff, diff))


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    s = e.sum(axis=axis, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def weight_matrix(logits: np.ndarray, mode: str = "one_sided") -> np.ndarray:
    """Normalised kernel weights from a (queries x targets) logit matrix; -inf marks exclusions."""
    if mode == "one_sided":
        return _softmax(logits, axis=1)
    if mode == "two_sided":
        kx = _softmax(logits, axis=1)
        ky = _softmax(logits, axis=0)
        g = np.sqrt(kx * ky)
        s = g.sum(axis=1, keepdims=True)
        return np.divide(g, s, out=np.zeros_like(g), where=s > 0)
    raise InvalidConfigError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}")


def kernel_weights(query, targets, tau: float, mode: str = "one_sided", cross_logits=None, row: int | None = None) -> np.ndarray:
    """Normalised Laplacian kernel weights of one query against its targets.

    Two-sided normalisation needs the whole batch: pass ``cross_logits`` (the
    queries x targets matrix of -distance / tau) and the query's ``row``.
    """
    if not tau > 0:
        raise InvalidConfigError("tau must be positive")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[0] == 0:
        raise InvalidInputError("empty target set")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if mode == "one_sided":
        logits = -_pairwise_distances(q, targets) / tau
        return weight_matrix(logits, "one_sided")[0]
    if mode == "two_sided":
        if cross_logits is None or row is None:
            raise InvalidInputError("two-sided normalisation requires cross_logits and the query row")
        cl = np.asarray(cross_logits, dtype=np.float64)
        if cl.shape[1] != targets.shape[0]:
            raise ShapeError("cross_logits columns must match the target count")
        return weight_matrix(cl, "two_sided")[row]
    raise InvalidConfigError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}")


def _weighted_displacement(points, targets, tau, mode, mask=None):
    logits = -_pairwise_distances(points, targets) / tau
    if mask is not None:
        logits = np.where(mask, -np.inf, logits)
    w = weight_matrix(logits, mode)
    if targets.ndim == 2:
        mean = w @ targets
    else:
        mean = np.einsum("pj,pjd->pd", w, targets)
    # rows with every target excluded have zero weight and no displacement
    return mean - w.sum(axis=1, keepdims=True) * points


def displacement_field(points, targets, tau: float, mode: str = "one_sided", mask=None) -> np.ndarray:
    """Kernel-weighted mean displacement of each point toward one target set, shape (P, D)."""
    if not tau > 0:
        raise InvalidConfigError("tau must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return _weighted_displacement(pts, np.asarray(targets, dtype=np.float64), tau, mode, mask)


def single_temperature_drift(batch: DriftBatch, tau: float, mode: str = "one_sided") -> np.ndarray:
    """V(u_i) = sum_j k(u_i, v+_j)(v+_j - u_i) - sum_k k(u_i, v-_k)(v-_k - u_i), shape (P, D)."""
    if not tau > 0:
        raise InvalidConfigError("tau must be positive")
    v = _weighted_displacement(batch.points, batch.pos_targets, tau, mode)
    if batch.n_neg > 0:
        v = v - _weighted_displacement(batch.points, batch.neg_targets, tau, mode, batch.neg_mask)
    return v


def multi_temperature_drift(batch: DriftBatch, config: DriftConfig) -> np.ndarray:
    total = np.zeros_like(batch.points)
    for tau in config.temperatures:
        v = single_temperature_drift(batch, tau, config.normalization)
        if config.temperature_norm == "point":
            v = v / (np.linalg.norm(v, axis=1, keepdims=True) + config.per_temperature_norm_epsilon)
        total += v
    return total


@dataclass(frozen=True, eq=False)
class BackMap:
    """Maps cotangents on drift-space points back to (P, N, 3) coordinate cotangents."""

    space: str
    types: tuple[int, ...]
    coords: np.ndarray
    order: np.ndarray | None = None

    def pullback(self, cotangent: np.ndarray) -> np.ndarray:
        p, n, _ = self.coords.shape
        if self.space == "embedded":
            return embed_pullback_batch(self.coords, self.types, self.order, cotangent)
        return np.asarray(cotangent, dtype=np.float64).reshape(p, n, 3)


def _stack(confs, types) -> np.ndarray:
    if isinstance(confs, np.ndarray):
        return np.asarray(confs, dtype=np.float64)
    arrs = []
    for c in confs:
        if tuple(c.types) != tuple(types):
            raise InvalidInputError("all conformations in a batch must share the class type sequence")
        arrs.append(c.coords)
    return np.stack(arrs) if arrs else np.zeros((0, len(types), 3))


def build_drift_batch_arrays(
    x: np.ndarray,
    y_plus: np.ndarray,
    y_minus: np.ndarray,
    types: Sequence[int],
    config: DriftConfig,
    neg_mask: np.ndarray | None = None,
) -> tuple[DriftBatch, BackMap]:
    """Array form of :func:`build_drift_batch` for (P, N, 3), (J, N, 3), (K, N, 3) inputs."""
    types = tuple(int(t) for t in types)
    x = np.asarray(x, dtype=np.float64)
    p, n, _ = x.shape
    yp = center_coords(np.asarray(y_plus, dtype=np.float64))
    ym = np.asarray(y_minus, dtype=np.float64).reshape(-1, n, 3)
    ym = center_coords(ym) if ym.shape[0] else ym
    if yp.shape[1:] != (n, 3):
        raise InvalidInputError("positive targets do not match the query atom count")
    if config.space == "cartesian":
        batch = DriftBatch(x.reshape(p, -1), yp.reshape(yp.shape[0], -1), ym.reshape(ym.shape[0], 3 * n), neg_mask)
        return batch, BackMap("cartesian", types, x)
    if config.space == "aligned":
        pos = aligned_target_sets(x, yp, types, config.align_strategy).reshape(p, yp.shape[0], -1)
        if ym.shape[0]:
            neg = aligned_target_sets(x, ym, types, config.align_strategy).reshape(p, ym.shape[0], -1)
        else:
            neg = np.zeros((p, 0, 3 * n))
        return DriftBatch(x.reshape(p, -1), pos, neg, neg_mask), BackMap("aligned", types, x)
    u, order = embed_batch(x, types)
    pos, _ = embed_batch(yp, types)
    neg = embed_batch(ym, types)[0] if ym.shape[0] else np.zeros((0, u.shape[1]))
    if pos.shape[1] != u.shape[1] or neg.shape[1] != u.shape[1]:
        raise InvalidInputError("embedding lengths differ across the batch")
    return DriftBatch(u, pos, neg, neg_mask), BackMap("embedded", types, x, order)


def build_drift_batch(
    xs: Sequence[Conformation],
    y_plus: Sequence[Conformation],
    y_minus: Sequence[Conformation],
    config: DriftConfig,
    neg_mask: np.ndarray | None = None,
) -> tuple[DriftBatch, BackMap]:
    """Drift batch for centred generated samples ``xs`` in the configured space."""
    if not xs:
        raise InvalidInputError("no generated samples")
    types = xs[0].types
    return build_drift_batch_arrays(
        _stack(xs, types), _stack(y_plus, types), _stack(y_minus, types), types, config, neg_mask
    )
