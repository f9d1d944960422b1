"""Typed point clouds, the rotation x type-preserving-permutation group, and group sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import InvalidGroupError, InvalidInputError, ShapeError

ORTHO_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Conformation:
    """An N x 3 cloud of typed atoms belonging to a conditioning class."""

    coords: np.ndarray
    types: tuple[int, ...]
    class_id: Hashable = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ShapeError(f"coords must be N x 3, got shape {coords.shape}")
        types = tuple(int(t) for t in self.types)
        if len(types) != coords.shape[0] or len(types) < 1:
            raise ShapeError(f"{len(types)} types for {coords.shape[0]} atoms")
        if any(t < 0 for t in types):
            raise InvalidInputError("atom types must be non-negative integers")
        if not np.all(np.isfinite(coords)):
            raise InvalidInputError("coords contain non-finite entries")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "types", types)

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]

    def with_coords(self, coords: np.ndarray) -> Conformation:
        return Conformation(coords, self.types, self.class_id)

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, Conformation):
            return NotImplemented
        return (
            self.types == other.types
            and self.class_id == other.class_id
            and np.array_equal(self.coords, other.coords)
        )

    def __repr__(self):
        return f"Conformation(n_atoms={self.n_atoms}, types={self.types}, class_id={self.class_id!r})"


def check_rotation(rotation: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidGroupError(f"rotation must be 3 x 3, got {r.shape}")
    if np.linalg.norm(r.T @ r - np.eye(3)) >= tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidGroupError("rotation is not a proper orthogonal matrix")
    return r


@dataclass(frozen=True, eq=False)
class GroupElement:
    """g = (R, pi) acting as (g.x)_i = R x_{pi(i)}."""

    rotation: np.ndarray
    permutation: np.ndarray

    def __post_init__(self):
        r = check_rotation(self.rotation)
        perm = np.asarray(self.permutation, dtype=np.int64).reshape(-1)
        n = perm.shape[0]
        if n < 1 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise InvalidGroupError("permutation is not a bijection on {0..N-1}")
        object.__setattr__(self, "rotation", _frozen(r))
        perm = perm.copy()
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)

    @classmethod
    def identity(cls, n_atoms: int) -> GroupElement:
        return cls(np.eye(3), np.arange(n_atoms))

    @property
    def n_atoms(self) -> int:
        return self.permutation.shape[0]

    def inverse(self) -> GroupElement:
        # (g.x)_i = R x_{pi(i)}  =>  (g^-1.z)_j = R^T z_{pi^-1(j)}
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.n_atoms)
        return GroupElement(self.rotation.T, inv)

    def compose(self, other: GroupElement) -> GroupElement:
        """Return self * other, i.e. the element acting as self.(other.x)."""
        # (h.(g.x))_i = Rh (g.x)_{ph(i)} = Rh Rg x_{pg(ph(i))}
        return GroupElement(self.rotation @ other.rotation, other.permutation[self.permutation])

    def preserves(self, types: Sequence[int]) -> bool:
        t = np.asarray(types)
        return t.shape[0] == self.n_atoms and bool(np.all(t[self.permutation] == t))

    def act_coords(self, coords: np.ndarray) -> np.ndarray:
        """Apply to a raw N x 3 array without type checks."""
        return coords[self.permutation] @ self.rotation.T


def center(conf: Conformation) -> Conformation:
    """Subtract the per-axis mean so the cloud's centroid sits at the origin."""
    return conf.with_coords(center_coords(conf.coords))


def center_coords(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("coords contain non-finite entries")
    return coords - coords.mean(axis=-2, keepdims=True)


def apply_group(g: GroupElement, conf: Conformation) -> Conformation:
    if g.n_atoms != conf.n_atoms:
        raise InvalidGroupError(f"group element acts on {g.n_atoms} atoms, conformation has {conf.n_atoms}")
    if not g.preserves(conf.types):
        raise InvalidGroupError("permutation does not preserve atom types")
    return conf.with_coords(g.act_coords(conf.coords))


class RandomSource:
    """Seeded stream of random draws; a thin wrapper over numpy's PCG64 generator."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def spawn(self, key: int) -> RandomSource:
        """Derive an independent stream keyed by ``key`` without consuming this one."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return RandomSource(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z), shape (..., 4), to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def sample_haar_rotations(rng: RandomSource, n: int) -> np.ndarray:
    """n Haar-uniform rotations, shape (n, 3, 3), from normalized Gaussian quaternions."""
    q = rng.normal((n, 4))
    norms = np.linalg.norm(q, axis=1)
    # a zero 4-vector has probability zero; redraw defensively
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        q[bad] = rng.normal((int(bad.sum()), 4))
        norms = np.linalg.norm(q, axis=1)
    return quaternion_to_matrix(q)


def sample_haar_rotation(rng: RandomSource) -> np.ndarray:
    return sample_haar_rotations(rng, 1)[0]


def type_classes(types: Sequence[int]) -> dict[int, np.ndarray]:
    """Map each atom type to the sorted indices of atoms carrying it."""
    t = np.asarray(types)
    return {int(a): np.flatnonzero(t == a) for a in np.unique(t)}


def sample_type_permutation(rng: RandomSource, types: Sequence[int]) -> np.ndarray:
    """Uniform element of the product of symmetric groups on each type class."""
    n = len(types)
    perm = np.arange(n)
    for idx in type_classes(types).values():
        if idx.size > 1:
            perm[idx] = idx[rng.permutation(idx.size)]
    return perm


def sample_group_element(rng: RandomSource, types: Sequence[int], permute: bool = True) -> GroupElement:
    rot = sample_haar_rotation(rng)
    perm = sample_type_permutation(rng, types) if permute else np.arange(len(types))
    return GroupElement(rot, perm)


def sample_type_permutations(rng: RandomSource, types: Sequence[int], n: int) -> np.ndarray:
    """n independent uniform type-preserving permutations, shape (n, N)."""
    perms = np.tile(np.arange(len(types)), (n, 1))
    for idx in type_classes(types).values():
        if idx.size > 1:
            keys = rng.uniform((n, idx.size))
            perms[:, idx] = idx[np.argsort(keys, axis=1)]
    return perms


def rotation_about_axis(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
    return quaternion_to_matrix(q)
