"""Optimal alignment of typed point clouds under rotations and type-preserving permutations.

Four strategies are provided: Kabsch-only (fixed correspondence), alternating
Kabsch / per-type Hungarian refinement, and exhaustive enumeration of all
type-preserving permutations, which serves as the exact oracle.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ComplexityGuardError, InvalidConfigError, InvalidInputError, ShapeError
from .geometry import Conformation, GroupElement, center_coords, type_classes

BRUTE_FORCE_MAX_CLASS = 8
BRUTE_FORCE_MAX_TOTAL = 2_000_000
CONVERGENCE_TOL = 1e-10
# blocks up to this size are solved by vectorised enumeration in the batched path
_ENUM_BLOCK_MAX = 5

VARIANTS = ("rotation_only", "iterative", "brute_force")
INIT_ORDERS = ("rotation_first", "permutation_first")


@dataclass(frozen=True)
class AlignStrategy:
    variant: str = "iterative"
    max_iterations: int = 50
    init_order: str = "rotation_first"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown alignment variant {self.variant!r}; expected one of {VARIANTS}")
        if self.init_order not in INIT_ORDERS:
            raise InvalidConfigError(f"unknown init_order {self.init_order!r}; expected one of {INIT_ORDERS}")
        if int(self.max_iterations) < 1:
            raise InvalidConfigError("max_iterations must be >= 1")


@dataclass(frozen=True)
class AlignmentResult:
    group_element: GroupElement
    residual: float
    iterations: int = 0
    # residual after each accepted iterate; first entry is the initial state
    history: tuple[float, ...] = ()


def _as_coords(c) -> np.ndarray:
    return c.coords if isinstance(c, Conformation) else np.asarray(c, dtype=np.float64)


def _check_pair(x, y) -> tuple[int, ...] | None:
    if isinstance(x, Conformation) and isinstance(y, Conformation):
        if x.n_atoms != y.n_atoms:
            raise ShapeError(f"atom counts differ: {x.n_atoms} vs {y.n_atoms}")
        if x.types != y.types:
            raise ShapeError("type sequences differ")
        return x.types
    xc, yc = _as_coords(x), _as_coords(y)
    if xc.shape != yc.shape:
        raise ShapeError(f"shapes differ: {xc.shape} vs {yc.shape}")
    return None


# ---------------------------------------------------------------------------
# Kabsch


def kabsch_batch(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Optimal proper rotations R[b] minimising ||x[b] - y[b] R[b]^T|| for centred (B, N, 3) inputs."""
    h = np.einsum("bni,bnj->bij", y, x)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    d = np.sign(np.linalg.det(v @ np.swapaxes(u, -1, -2)))
    d[d == 0] = 1.0
    u = u.copy()
    # flipping the last column of u is the same as inserting diag(1, 1, d)
    u[..., :, 2] *= d[..., None]
    return v @ np.swapaxes(u, -1, -2)


def kabsch_rotation(x, y) -> np.ndarray:
    """Rotation R minimising ||x - y R^T||_F with the given atom correspondence."""
    _check_pair(x, y)
    xc = center_coords(_as_coords(x))
    yc = center_coords(_as_coords(y))
    return kabsch_batch(xc[None], yc[None])[0]


# ---------------------------------------------------------------------------
# Hungarian


def _hungarian_core(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method; returns (row->col, row duals, col duals)."""
    n = cost.shape[0]
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)  # match_col[j] = row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[match_col[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], cols_free: set[int]) -> bool:
    match: dict[int, int] = {}

    def augment(r: int, seen: set[int]) -> bool:
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian_assignment(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment of a square matrix.

    Returns ``(perm, total)`` with row ``i`` assigned to column ``perm[i]``.
    Among equal-cost optima the lexicographically smallest permutation is
    returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidInputError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost matrix contains non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    perm, u, v = _hungarian_core(c)
    # every optimal assignment uses only tight edges of an optimal dual, so the
    # lexicographic optimum is the lexicographically first perfect matching on them
    reduced = c - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.max(np.abs(c))))
    adj = [sorted(np.flatnonzero(reduced[i] <= tol).tolist()) for i in range(n)]
    free = set(range(n))
    lex = np.empty(n, dtype=np.int64)
    for i in range(n):
        for j in adj[i]:
            if j not in free:
                continue
            free.discard(j)
            if _has_perfect_matching(adj, list(range(i + 1, n)), free):
                lex[i] = j
                break
            free.add(j)
        else:  # pragma: no cover - tolerance breakdown, keep the raw optimum
            lex = perm
            break
    total = float(c[np.arange(n), lex].sum())
    return lex, total


# ---------------------------------------------------------------------------
# type-wise assignment


def typewise_assignment(x, y_rotated, types: Sequence[int] | None = None) -> np.ndarray:
    """Type-preserving permutation pi minimising sum_i ||x_i - y_rotated[pi(i)]||^2."""
    if types is None:
        if not isinstance(x, Conformation):
            raise InvalidInputError("types are required when x is a raw array")
        types = x.types
    if isinstance(y_rotated, Conformation):
        if sorted(y_rotated.types) != sorted(types):
            raise InvalidInputError("type multisets differ")
        if tuple(y_rotated.types) != tuple(types):
            raise InvalidInputError("type sequences differ")
    xc, yc = _as_coords(x), _as_coords(y_rotated)
    if xc.shape != yc.shape or xc.shape[0] != len(types):
        raise ShapeError(f"shapes differ: {xc.shape} vs {yc.shape}")
    perm = np.arange(len(types))
    for idx in type_classes(types).values():
        if idx.size == 1:
            continue
        diff = xc[idx][:, None, :] - yc[idx][None, :, :]
        block_perm, _ = hungarian_assignment(np.einsum("ijk,ijk->ij", diff, diff))
        perm[idx] = idx[block_perm]
    return perm


@lru_cache(maxsize=None)
def _block_perms(m: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(m))), dtype=np.int64)


def typewise_assignment_batch(x: np.ndarray, y_rotated: np.ndarray, types: Sequence[int]) -> np.ndarray:
    """Batched typewise assignment for (B, N, 3) arrays; returns (B, N) permutations.

    Small blocks are solved by vectorised enumeration in lexicographic order,
    which yields the same lexicographically smallest optimum as the Hungarian path.
    """
    b, n, _ = x.shape
    perms = np.tile(np.arange(n), (b, 1))
    for idx in type_classes(types).values():
        m = idx.size
        if m == 1:
            continue
        diff = x[:, idx][:, :, None, :] - y_rotated[:, idx][:, None, :, :]
        cost = np.einsum("bijk,bijk->bij", diff, diff)
        if m <= _ENUM_BLOCK_MAX:
            cand = _block_perms(m)
            totals = cost[:, np.arange(m)[None, :], cand].sum(axis=-1)
            best = cand[np.argmin(totals, axis=1)]
        else:
            best = np.stack([hungarian_assignment(cost[k])[0] for k in range(b)])
        perms[:, idx] = idx[best]
    return perms


# ---------------------------------------------------------------------------
# alignment


def _residuals(x: np.ndarray, y_perm: np.ndarray, rot: np.ndarray) -> np.ndarray:
    d = x - y_perm @ np.swapaxes(rot, -1, -2)
    return np.sqrt(np.einsum("bij,bij->b", d, d))


def _take(y: np.ndarray, perms: np.ndarray) -> np.ndarray:
    return np.take_along_axis(y, perms[:, :, None], axis=1)


def _type_product_size(types: Sequence[int]) -> int:
    return math.prod(math.factorial(idx.size) for idx in type_classes(types).values())


@lru_cache(maxsize=64)
def type_preserving_permutations(types: tuple[int, ...]) -> np.ndarray:
    """Every permutation preserving ``types``, shape (P, N), in a fixed enumeration order."""
    classes = list(type_classes(types).values())
    largest = max(idx.size for idx in classes)
    if largest > BRUTE_FORCE_MAX_CLASS:
        raise ComplexityGuardError(
            f"type class of size {largest} exceeds the brute-force limit of {BRUTE_FORCE_MAX_CLASS}"
        )
    total = _type_product_size(types)
    if total > BRUTE_FORCE_MAX_TOTAL:
        raise ComplexityGuardError(f"{total} type-preserving permutations exceed {BRUTE_FORCE_MAX_TOTAL}")
    n = len(types)
    out = np.tile(np.arange(n), (total, 1))
    block_choices = [[idx[list(p)] for p in itertools.permutations(range(idx.size))] for idx in classes]
    for row, combo in enumerate(itertools.product(*block_choices)):
        for idx, assigned in zip(classes, combo):
            out[row, idx] = assigned
    out.setflags(write=False)
    return out


def _align_iterative_batch(x, y, types, strategy: AlignStrategy):
    b, n, _ = x.shape
    if strategy.init_order == "rotation_first":
        perms = np.tile(np.arange(n), (b, 1))
        rot = kabsch_batch(x, y)
    else:
        perms = typewise_assignment_batch(x, y, types)
        rot = kabsch_batch(x, _take(y, perms))
    res = _residuals(x, _take(y, perms), rot)
    history = [res.copy()]
    iters = np.zeros(b, dtype=np.int64)
    active = np.ones(b, dtype=bool)
    for _ in range(strategy.max_iterations):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        xa, ya = x[ia], y[ia]
        new_perms = typewise_assignment_batch(xa, ya @ np.swapaxes(rot[ia], -1, -2), types)
        # an unchanged assignment reproduces the same rotation, so it has converged
        moved = np.any(new_perms != perms[ia], axis=1)
        iters[ia] += 1
        active[ia[~moved]] = False
        ia, xa, ya, new_perms = ia[moved], xa[moved], ya[moved], new_perms[moved]
        if ia.size == 0:
            history.append(res.copy())
            continue
        yp = _take(ya, new_perms)
        new_rot = kabsch_batch(xa, yp)
        new_res = _residuals(xa, yp, new_rot)
        improvement = res[ia] - new_res
        accept = new_res <= res[ia]
        acc = ia[accept]
        perms[acc] = new_perms[accept]
        rot[acc] = new_rot[accept]
        res[acc] = new_res[accept]
        active[ia[improvement < CONVERGENCE_TOL]] = False
        history.append(res.copy())
    return perms, rot, res, iters, np.stack(history, axis=1)


def _align_brute_force_batch(x, y, types):
    cand = type_preserving_permutations(tuple(types))
    b, n, _ = x.shape
    p = cand.shape[0]
    best_res = np.full(b, np.inf)
    best_perm = np.zeros((b, n), dtype=np.int64)
    best_rot = np.tile(np.eye(3), (b, 1, 1))
    chunk = max(1, 200_000 // max(1, p))
    for start in range(0, b, chunk):
        sl = slice(start, min(b, start + chunk))
        xs, ys = x[sl], y[sl]
        k = xs.shape[0]
        yp = ys[:, cand]  # (k, P, N, 3)
        xr = np.broadcast_to(xs[:, None], yp.shape).reshape(k * p, n, 3)
        ypr = yp.reshape(k * p, n, 3)
        rot = kabsch_batch(xr, ypr)
        res = _residuals(xr, ypr, rot).reshape(k, p)
        arg = np.argmin(res, axis=1)
        best_res[sl] = res[np.arange(k), arg]
        best_perm[sl] = cand[arg]
        best_rot[sl] = rot.reshape(k, p, 3, 3)[np.arange(k), arg]
    return best_perm, best_rot, best_res


def align_batch(x: np.ndarray, y: np.ndarray, types: Sequence[int], strategy: AlignStrategy):
    """Align y[b] onto x[b] for centred (B, N, 3) arrays.

    Returns ``(perms, rotations, residuals, iterations)``; the aligned target is
    ``y[b][perms[b]] @ rotations[b].T``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, n, _ = x.shape
    if strategy.variant == "rotation_only":
        perms = np.tile(np.arange(n), (b, 1))
        rot = kabsch_batch(x, y)
        return perms, rot, _residuals(x, y, rot), np.zeros(b, dtype=np.int64)
    if strategy.variant == "iterative":
        perms, rot, res, iters, _ = _align_iterative_batch(x, y, types, strategy)
        return perms, rot, res, iters
    perms, rot, res = _align_brute_force_batch(x, y, types)
    return perms, rot, res, np.zeros(b, dtype=np.int64)


def align(x: Conformation, y: Conformation, strategy: AlignStrategy | None = None) -> AlignmentResult:
    """Group element g minimising ||x - g.y|| after centring both clouds."""
    strategy = strategy or AlignStrategy()
    if sorted(x.types) != sorted(y.types):
        raise InvalidInputError("type multisets differ")
    if x.types != y.types:
        raise InvalidInputError("type sequences differ; reorder y to match x")
    xc = center_coords(x.coords)[None]
    yc = center_coords(y.coords)[None]
    history: tuple[float, ...] = ()
    if strategy.variant == "iterative":
        perms, rot, res, iters, hist = _align_iterative_batch(xc, yc, x.types, strategy)
        history = tuple(float(h) for h in hist[0])
    else:
        perms, rot, res, iters = align_batch(xc, yc, x.types, strategy)
        history = (float(res[0]),)
    g = GroupElement(rot[0], perms[0])
    residual = float(np.linalg.norm(xc[0] - g.act_coords(yc[0])))
    return AlignmentResult(g, residual, int(iters[0]), history)


def aligned_targets(x: Conformation, ys: Sequence[Conformation], strategy: AlignStrategy | None = None) -> list[np.ndarray]:
    """Centred coordinates g*(x, y_j).y_j for every target."""
    out = []
    for y in ys:
        r = align(x, y, strategy)
        out.append(center_coords(r.group_element.act_coords(center_coords(y.coords))))
    return out


def aligned_target_sets(xs: np.ndarray, ys: np.ndarray, types: Sequence[int], strategy: AlignStrategy) -> np.ndarray:
    """Every target aligned to every query: (P, N, 3) x (M, N, 3) -> (P, M, N, 3)."""
    p, n, _ = xs.shape
    m = ys.shape[0]
    xr = np.repeat(xs, m, axis=0)
    yr = np.tile(ys, (p, 1, 1))
    perms, rot, _, _ = align_batch(xr, yr, types, strategy)
    out = _take(yr, perms) @ np.swapaxes(rot, -1, -2)
    return out.reshape(p, m, n, 3)
