"""Rotation- and permutation-invariant embedding built from type-resolved sorted pair distances."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError, SingularGradientError
from .geometry import Conformation

TIE_TOL = 1e-12
COINCIDENCE_TOL = 1e-9


@dataclass(frozen=True)
class PairLayout:
    """Canonical block structure for one type sequence."""

    blocks: tuple[tuple[int, int], ...]
    block_index: dict
    # unsorted pairs in block order; pair_i[k], pair_j[k] with i < j
    pair_i: np.ndarray
    pair_j: np.ndarray

    @property
    def size(self) -> int:
        return self.pair_i.shape[0]


@lru_cache(maxsize=256)
def pair_layout(types: tuple[int, ...]) -> PairLayout:
    n = len(types)
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i in range(n):
        for j in range(i + 1, n):
            key = (min(types[i], types[j]), max(types[i], types[j]))
            groups.setdefault(key, []).append((i, j))
    blocks = tuple(sorted(groups))
    block_index = {}
    pi, pj = [], []
    offset = 0
    for key in blocks:
        pairs = groups[key]
        block_index[key] = (offset, len(pairs))
        offset += len(pairs)
        pi.extend(p[0] for p in pairs)
        pj.extend(p[1] for p in pairs)
    pair_i = np.array(pi, dtype=np.int64)
    pair_j = np.array(pj, dtype=np.int64)
    pair_i.setflags(write=False)
    pair_j.setflags(write=False)
    return PairLayout(blocks, block_index, pair_i, pair_j)


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    block_index: dict
    # atom pair occupying each sorted slot, frozen at the forward pass
    slot_pairs: np.ndarray
    has_ties: bool = False

    def block(self, a: int, b: int) -> np.ndarray:
        off, length = self.block_index[(min(a, b), max(a, b))]
        return self.values[off : off + length]

    def __len__(self):
        return self.values.shape[0]


def _sorted_within_blocks(d: np.ndarray, layout: PairLayout) -> np.ndarray:
    """Stable within-block argsort of (B, K) distances; returns slot -> unsorted index."""
    order = np.empty(d.shape, dtype=np.int64)
    for off, length in layout.block_index.values():
        sl = slice(off, off + length)
        order[:, sl] = off + np.argsort(d[:, sl], axis=1, kind="stable")
    return order


def embed_batch(coords: np.ndarray, types: Sequence[int]):
    """Embed (B, N, 3) clouds sharing one type sequence.

    Returns ``(values, order)`` where ``order[b, k]`` indexes the layout pair
    sitting at sorted slot ``k``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("coords contain non-finite entries")
    layout = pair_layout(tuple(int(t) for t in types))
    diff = coords[:, layout.pair_i] - coords[:, layout.pair_j]
    d = np.sqrt(np.einsum("bkc,bkc->bk", diff, diff))
    order = _sorted_within_blocks(d, layout)
    return np.take_along_axis(d, order, axis=1), order


def embed(conf: Conformation) -> Embedding:
    layout = pair_layout(conf.types)
    values, order = embed_batch(conf.coords[None], conf.types)
    values, order = values[0], order[0]
    slot_pairs = np.stack([layout.pair_i[order], layout.pair_j[order]], axis=1)
    ties = False
    for off, length in layout.block_index.values():
        if length > 1 and np.any(np.diff(values[off : off + length]) < TIE_TOL):
            ties = True
    values.setflags(write=False)
    return Embedding(values, dict(layout.block_index), slot_pairs, ties)


def embed_pullback_batch(coords: np.ndarray, types: Sequence[int], order: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the embedding for (B, N, 3) clouds with frozen sort ``order``."""
    layout = pair_layout(tuple(int(t) for t in types))
    b, n, _ = coords.shape
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (b, layout.size):
        raise ShapeError(f"cotangent shape {cot.shape} does not match embedding shape {(b, layout.size)}")
    # cotangent on sorted slot k belongs to unsorted pair order[k]
    unsorted = np.empty_like(cot)
    np.put_along_axis(unsorted, order, cot, axis=1)
    diff = coords[:, layout.pair_i] - coords[:, layout.pair_j]
    d = np.sqrt(np.einsum("bkc,bkc->bk", diff, diff))
    if np.any(d <= COINCIDENCE_TOL):
        raise SingularGradientError("coincident atoms: pair distance gradient is undefined")
    contrib = (unsorted / d)[:, :, None] * diff
    grad = np.zeros((b, n, 3))
    for k in range(layout.size):
        grad[:, layout.pair_i[k]] += contrib[:, k]
        grad[:, layout.pair_j[k]] -= contrib[:, k]
    return grad


def embed_pullback(conf: Conformation, cotangent, embedding: Embedding | None = None) -> np.ndarray:
    """Gradient of <cotangent, embed(x)> with respect to the N x 3 coordinates.

    The sort order is the one of ``embedding`` when given (e.g. from an earlier
    forward pass) and is recomputed otherwise.
    """
    emb = embedding if embedding is not None else embed(conf)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    if cot.shape[0] != len(emb):
        raise ShapeError(f"cotangent length {cot.shape[0]} != embedding length {len(emb)}")
    x = conf.coords
    grad = np.zeros_like(x)
    for k, (i, j) in enumerate(emb.slot_pairs):
        diff = x[i] - x[j]
        dist = np.linalg.norm(diff)
        if dist <= COINCIDENCE_TOL:
            raise SingularGradientError(f"atoms {i} and {j} coincide")
        g = cot[k] * diff / dist
        grad[i] += g
        grad[j] -= g
    return grad
