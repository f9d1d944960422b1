import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exhaustive_assignment, grid_min_residual, horn_rotation
from symdrift.alignment import (
    AlignStrategy,
    align,
    align_batch,
    aligned_target_sets,
    aligned_targets,
    hungarian_assignment,
    kabsch_rotation,
    type_preserving_permutations,
    typewise_assignment,
)
from symdrift.errors import ComplexityGuardError, InvalidConfigError, InvalidInputError, ShapeError
from symdrift.geometry import (
    Conformation,
    GroupElement,
    RandomSource,
    apply_group,
    center,
    sample_group_element,
    sample_haar_rotation,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _cloud(rng, types, scale=1.0):
    return center(Conformation(scale * rng.normal((len(types), 3)), tuple(types)))


# -- Kabsch ------------------------------------------------------------------


def test_kabsch_self_alignment():
    x = RandomSource(0).normal((5, 3))
    r = kabsch_rotation(x, x)
    np.testing.assert_allclose(r, np.eye(3), atol=1e-12)


def test_kabsch_exact_recovery():
    rng = RandomSource(1)
    x = _cloud(rng, range(6)).coords
    r0 = sample_haar_rotation(rng)
    y = x @ r0  # rows times R0 apply R0^T, so R0 maps y back onto x
    r = kabsch_rotation(x, y)
    np.testing.assert_allclose(r, r0, atol=1e-8)
    assert np.linalg.norm(x - y @ r.T) < 1e-8


def test_kabsch_matches_grid_search():
    rng = RandomSource(2)
    x = _cloud(rng, range(6)).coords
    y = (x + 0.1 * rng.normal(x.shape)) @ sample_haar_rotation(rng)
    y = y - y.mean(axis=0)
    r = kabsch_rotation(x, y)
    res = np.linalg.norm(x - y @ r.T)
    grid = grid_min_residual(x, y)
    assert res <= grid + 1e-12
    assert grid - res < 1e-4


def test_kabsch_returns_proper_rotation_for_mirror_pair():
    x = _cloud(RandomSource(3), range(5)).coords
    y = x * np.array([1.0, 1.0, -1.0])
    r = kabsch_rotation(x, y)
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=seeds, n=st.integers(3, 8))
def test_kabsch_agrees_with_quaternion_oracle(seed, n):
    rng = RandomSource(seed)
    x = _cloud(rng, range(n)).coords
    y = _cloud(rng, range(n)).coords
    r = kabsch_rotation(x, y)
    ref = horn_rotation(x, y)
    # compare residuals: the optimiser can be non-unique for degenerate inputs
    assert np.linalg.norm(x - y @ r.T) <= np.linalg.norm(x - y @ ref.T) + 1e-9
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-10


def test_kabsch_shape_mismatch():
    with pytest.raises(ShapeError):
        kabsch_rotation(np.zeros((3, 3)), np.zeros((4, 3)))


# -- Hungarian ---------------------------------------------------------------


def test_hungarian_zero_diagonal():
    perm, cost = hungarian_assignment([[0, 1], [1, 0]])
    assert list(perm) == [0, 1] and cost == 0


def test_hungarian_symmetric_two_by_two():
    perm, cost = hungarian_assignment([[1, 2], [2, 1]])
    assert list(perm) == [0, 1] and cost == 2


def test_hungarian_matches_exhaustive_on_integer_matrices():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = rng.integers(0, 10, size=(5, 5))
        perm, cost = hungarian_assignment(c)
        ref_perm, ref_cost = exhaustive_assignment(c)
        assert cost == ref_cost
        # ties resolve to the lexicographically smallest optimum
        assert list(perm) == list(ref_perm)


def test_hungarian_rejects_bad_matrices():
    with pytest.raises(InvalidInputError):
        hungarian_assignment(np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        hungarian_assignment([[0.0, np.inf], [1.0, 0.0]])


def test_hungarian_empty():
    perm, cost = hungarian_assignment(np.zeros((0, 0)))
    assert perm.size == 0 and cost == 0.0


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 6),
    data=st.data(),
)
def test_hungarian_property(n, data):
    vals = data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=n * n, max_size=n * n))
    c = np.array(vals).reshape(n, n)
    perm, cost = hungarian_assignment(c)
    assert sorted(perm.tolist()) == list(range(n))
    _, ref = exhaustive_assignment(c)
    assert cost == pytest.approx(ref, abs=1e-9 * max(1.0, np.abs(c).max()))


# -- type-wise assignment ------------------------------------------------------


def test_typewise_distinct_types_is_identity():
    rng = RandomSource(4)
    x = _cloud(rng, (0, 1, 2))
    y = _cloud(rng, (0, 1, 2))
    assert list(typewise_assignment(x, y)) == [0, 1, 2]


def test_typewise_recovers_swap():
    x = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 2.0, 0]])
    y = x[[1, 0, 2]]
    perm = typewise_assignment(x, y, (0, 0, 1))
    np.testing.assert_array_equal(y[perm], x)


def test_typewise_three_same_type_matches_exhaustive():
    rng = RandomSource(5)
    for _ in range(20):
        x = rng.normal((3, 3))
        y = rng.normal((3, 3))
        perm = typewise_assignment(x, y, (0, 0, 0))
        cost = np.sum((x - y[perm]) ** 2)
        best = min(np.sum((x - y[list(p)]) ** 2) for p in itertools.permutations(range(3)))
        assert cost == pytest.approx(best, abs=1e-12)


def test_typewise_rejects_mismatched_types():
    x = Conformation(np.zeros((2, 3)), (0, 1))
    y = Conformation(np.zeros((2, 3)), (1, 0))
    with pytest.raises(InvalidInputError):
        typewise_assignment(x, y)


# -- full alignment ------------------------------------------------------------


def test_brute_force_recovers_orbit_member():
    rng = RandomSource(6)
    types = (0, 0, 1, 1, 1, 2)
    for _ in range(10):
        x = _cloud(rng, types)
        y = apply_group(sample_group_element(rng, types), x)
        res = align(x, y, AlignStrategy("brute_force"))
        assert res.residual < 1e-8


def test_variant_ordering_on_random_pairs():
    rng = RandomSource(7)
    types = (0, 0, 0, 1, 1)
    for _ in range(100):
        x = _cloud(rng, types)
        y = _cloud(rng, types)
        bf = align(x, y, AlignStrategy("brute_force")).residual
        it = align(x, y, AlignStrategy("iterative")).residual
        ro = align(x, y, AlignStrategy("rotation_only")).residual
        assert bf <= it + 1e-10
        assert it <= ro + 1e-10


def test_iterative_swap_within_type_class():
    x = Conformation(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), (0, 0))
    y = Conformation(x.coords[[1, 0]], (0, 0))
    res = align(x, y, AlignStrategy("iterative", init_order="rotation_first"))
    assert res.residual < 1e-12


def test_iterative_history_is_non_increasing():
    rng = RandomSource(8)
    types = (0, 0, 0, 0, 1, 1)
    for _ in range(20):
        res = align(_cloud(rng, types), _cloud(rng, types), AlignStrategy("iterative"))
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 1e-12)
        assert res.residual == pytest.approx(h[-1], abs=1e-12)


def test_alignment_result_residual_is_consistent():
    rng = RandomSource(9)
    types = (0, 1, 1, 2)
    x, y = _cloud(rng, types), _cloud(rng, types)
    for variant in ("rotation_only", "iterative", "brute_force"):
        r = align(x, y, AlignStrategy(variant))
        assert r.group_element.preserves(types)
        direct = np.linalg.norm(x.coords - apply_group(r.group_element, y).coords)
        assert direct == pytest.approx(r.residual, abs=1e-12)


def test_permutation_first_init():
    rng = RandomSource(10)
    types = (0, 0, 1, 1)
    x = _cloud(rng, types)
    y = apply_group(sample_group_element(rng, types), x)
    r = align(x, y, AlignStrategy("iterative", init_order="permutation_first"))
    bf = align(x, y, AlignStrategy("brute_force")).residual
    assert r.residual >= bf - 1e-10


def test_align_rejects_mismatched_types():
    x = Conformation(np.zeros((2, 3)), (0, 1))
    with pytest.raises(InvalidInputError):
        align(x, Conformation(np.zeros((2, 3)), (0, 0)))
    with pytest.raises(InvalidInputError):
        align(x, Conformation(np.zeros((2, 3)), (1, 0)))


def test_strategy_validation():
    with pytest.raises(InvalidConfigError):
        AlignStrategy("greedy")
    with pytest.raises(InvalidConfigError):
        AlignStrategy(init_order="random")
    with pytest.raises(InvalidConfigError):
        AlignStrategy(max_iterations=0)


def test_brute_force_complexity_guard():
    with pytest.raises(ComplexityGuardError):
        type_preserving_permutations(tuple([0] * 9))
    with pytest.raises(ComplexityGuardError):
        type_preserving_permutations(tuple([0] * 8 + [1] * 8))


def test_type_preserving_enumeration():
    perms = type_preserving_permutations((0, 1, 0, 1))
    assert perms.shape == (4, 4)
    assert len({tuple(p) for p in perms}) == 4
    assert all(np.array_equal(np.array([0, 1, 0, 1])[p], [0, 1, 0, 1]) for p in perms)


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_brute_force_is_equivariant_in_the_target(seed):
    # residual of x vs g.y equals residual of x vs y for any group element g
    rng = RandomSource(seed)
    types = (0, 0, 1, 2, 2)
    x, y = _cloud(rng, types), _cloud(rng, types)
    g = sample_group_element(rng, types)
    a = align(x, y, AlignStrategy("brute_force")).residual
    b = align(x, apply_group(g, y), AlignStrategy("brute_force")).residual
    assert a == pytest.approx(b, abs=1e-9)


# -- batched targets -------------------------------------------------------------


def test_aligned_targets_self():
    x = _cloud(RandomSource(11), (0, 0, 1))
    out = aligned_targets(x, [x])
    np.testing.assert_allclose(out[0], x.coords, atol=1e-12)


def test_aligned_targets_rotated_copies_collapse():
    rng = RandomSource(12)
    x = _cloud(rng, (0, 1, 2, 3))
    copies = [x.with_coords(x.coords @ sample_haar_rotation(rng)) for _ in range(5)]
    for out in aligned_targets(x, copies):
        assert np.max(np.abs(out - x.coords)) < 1e-8


def test_aligned_targets_match_standalone_calls():
    rng = RandomSource(13)
    types = (0, 0, 0, 1)
    x = _cloud(rng, types)
    ys = [_cloud(rng, types) for _ in range(4)]
    outs = aligned_targets(x, ys, AlignStrategy("iterative"))
    for y, out in zip(ys, outs):
        r = align(x, y, AlignStrategy("iterative"))
        assert np.linalg.norm(x.coords - out) == pytest.approx(r.residual, abs=1e-12)


def test_aligned_target_sets_matches_pairwise():
    rng = RandomSource(14)
    types = (0, 0, 1, 1, 2)
    xs = np.stack([_cloud(rng, types).coords for _ in range(3)])
    ys = np.stack([_cloud(rng, types).coords for _ in range(4)])
    out = aligned_target_sets(xs, ys, types, AlignStrategy("brute_force"))
    assert out.shape == (3, 4, 5, 3)
    for i in range(3):
        for j in range(4):
            r = align(Conformation(xs[i], types), Conformation(ys[j], types), AlignStrategy("brute_force"))
            np.testing.assert_allclose(out[i, j], r.group_element.act_coords(ys[j]), atol=1e-12)


def test_align_batch_matches_single():
    rng = RandomSource(15)
    types = (0, 0, 1, 1)
    xs = np.stack([_cloud(rng, types).coords for _ in range(6)])
    ys = np.stack([_cloud(rng, types).coords for _ in range(6)])
    perms, rot, res, _ = align_batch(xs, ys, types, AlignStrategy("iterative"))
    for b in range(6):
        single = align(Conformation(xs[b], types), Conformation(ys[b], types), AlignStrategy("iterative"))
        assert res[b] == pytest.approx(single.residual, abs=1e-12)
        g = GroupElement(rot[b], perms[b])
        assert np.linalg.norm(xs[b] - g.act_coords(ys[b])) == pytest.approx(res[b], abs=1e-12)
