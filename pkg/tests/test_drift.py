import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_drift, naive_multi_temperature, naive_two_sided_weights
from symdrift.alignment import AlignStrategy, aligned_targets
from symdrift.drift import (
    DriftBatch,
    DriftConfig,
    build_drift_batch,
    build_drift_batch_arrays,
    displacement_field,
    kernel_weights,
    multi_temperature_drift,
    single_temperature_drift,
    weight_matrix,
)
from symdrift.errors import InvalidConfigError, InvalidInputError, ShapeError
from symdrift.geometry import Conformation, RandomSource, center, sample_haar_rotation

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_single_target_weight():
    np.testing.assert_array_equal(kernel_weights([0.0, 0.0], [[1.0, 2.0]], 0.3), [1.0])


def test_equidistant_targets():
    w = kernel_weights([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], 0.7)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)


def test_analytic_softmax():
    tau = 0.4
    w = kernel_weights([0.0], [[tau], [2 * tau]], tau)
    np.testing.assert_allclose(w, [0.7310585786300049, 0.2689414213699951], atol=1e-12)


def test_weights_reject_bad_inputs():
    with pytest.raises(InvalidConfigError):
        kernel_weights([0.0], [[1.0]], 0.0)
    with pytest.raises(InvalidInputError):
        kernel_weights([0.0], np.zeros((0, 1)), 1.0)
    with pytest.raises(InvalidInputError):
        kernel_weights([0.0], [[1.0]], 1.0, mode="two_sided")
    with pytest.raises(InvalidConfigError):
        kernel_weights([0.0], [[1.0]], 1.0, mode="sideways")


def test_two_sided_weights_match_oracle():
    rng = RandomSource(0)
    pts, tgt = rng.normal((4, 3)), rng.normal((5, 3))
    tau = 0.8
    logits = -np.linalg.norm(pts[:, None] - tgt[None], axis=-1) / tau
    ref = np.array(naive_two_sided_weights(pts.tolist(), tgt.tolist(), tau))
    np.testing.assert_allclose(weight_matrix(logits, "two_sided"), ref, atol=1e-14)
    np.testing.assert_allclose(kernel_weights(pts[2], tgt, tau, "two_sided", logits, 2), ref[2], atol=1e-14)


def test_one_positive_no_negatives():
    u = np.array([[0.5, -1.0, 2.0]])
    v = np.array([[1.0, 1.0, 1.0]])
    out = single_temperature_drift(DriftBatch(u, v, np.zeros((0, 3))), 0.1)
    np.testing.assert_array_equal(out, v - u)


def test_attraction_cancels_repulsion():
    rng = RandomSource(1)
    pts, tgt = rng.normal((4, 6)), rng.normal((3, 6))
    for mode in ("one_sided", "two_sided"):
        out = single_temperature_drift(DriftBatch(pts, tgt, tgt[::-1]), 0.5, mode)
        assert np.max(np.abs(out)) < 1e-12


def test_three_positives_two_negatives_against_oracle():
    rng = RandomSource(2)
    pts, pos, neg = rng.normal((1, 4)), rng.normal((3, 4)), rng.normal((2, 4))
    out = single_temperature_drift(DriftBatch(pts, pos, neg), 0.6)
    np.testing.assert_allclose(out, naive_drift(pts, pos, neg, 0.6), atol=1e-12)


def test_random_batches_match_double_loop():
    rng = RandomSource(3)
    for _ in range(50):
        p, j, k, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(0, 6), rng.integers(1, 8)
        pts, pos, neg = rng.normal((p, d)), rng.normal((j, d)), rng.normal((k, d))
        tau = float(0.1 + rng.uniform())
        for mode in ("one_sided", "two_sided"):
            out = single_temperature_drift(DriftBatch(pts, pos, neg), tau, mode)
            np.testing.assert_allclose(out, naive_drift(pts, pos, neg, tau, mode), atol=1e-12)


def test_negative_mask_excludes_entries():
    rng = RandomSource(4)
    pts = rng.normal((3, 2))
    neg = pts.copy()
    mask = np.eye(3, dtype=bool)
    pos = rng.normal((2, 2))
    out = single_temperature_drift(DriftBatch(pts, pos, neg, mask), 0.5)
    ref = naive_drift(pts, pos, neg, 0.5, neg_excluded=[{i} for i in range(3)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_per_query_targets():
    rng = RandomSource(5)
    pts = rng.normal((3, 4))
    pos = rng.normal((3, 2, 4))
    out = single_temperature_drift(DriftBatch(pts, pos, np.zeros((3, 0, 4))), 0.3)
    for i in range(3):
        np.testing.assert_allclose(out[i], naive_drift(pts[i : i + 1], pos[i], [], 0.3)[0], atol=1e-12)


def test_batch_validation():
    with pytest.raises(ShapeError):
        DriftBatch(np.zeros((2, 3)), np.zeros((1, 4)), np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        DriftBatch(np.zeros((2, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        DriftBatch(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((2, 3), bool))


def test_multi_temperature_direction_single_positive():
    u = np.array([[0.0, 0.0, 0.0]])
    v = np.array([[0.3, -0.4, 1.2]])
    out = multi_temperature_drift(DriftBatch(u, v, np.zeros((0, 3))), DriftConfig())
    cos = float(out[0] @ (v - u)[0] / (np.linalg.norm(out[0]) * np.linalg.norm(v - u)))
    assert abs(cos - 1.0) < 1e-9
    d = np.linalg.norm(v - u)
    assert np.linalg.norm(out) == pytest.approx(3 * d / (d + 1e-8), rel=1e-12)


def test_multi_temperature_zero_field():
    rng = RandomSource(6)
    pts, tgt = rng.normal((3, 5)), rng.normal((4, 5))
    out = multi_temperature_drift(DriftBatch(pts, tgt, tgt), DriftConfig())
    assert np.max(np.abs(out)) < 1e-9


def test_multi_temperature_matches_recomputation():
    rng = RandomSource(7)
    cfg = DriftConfig()
    for mode in ("one_sided", "two_sided"):
        cfg = DriftConfig(normalization=mode)
        pts, pos, neg = rng.normal((4, 6)), rng.normal((5, 6)), rng.normal((3, 6))
        out = multi_temperature_drift(DriftBatch(pts, pos, neg), cfg)
        ref = naive_multi_temperature(pts, pos, neg, cfg.temperatures, cfg.per_temperature_norm_epsilon, mode)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_multi_temperature_without_normalisation_is_plain_sum():
    rng = RandomSource(8)
    pts, pos, neg = rng.normal((2, 3)), rng.normal((3, 3)), rng.normal((2, 3))
    cfg = DriftConfig(temperature_norm="none")
    out = multi_temperature_drift(DriftBatch(pts, pos, neg), cfg)
    ref = sum(naive_drift(pts, pos, neg, t) for t in cfg.temperatures)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        DriftConfig(temperatures=())
    with pytest.raises(InvalidConfigError):
        DriftConfig(temperatures=(0.1, -1.0))
    with pytest.raises(InvalidConfigError, match="space"):
        DriftConfig(space="polar")
    with pytest.raises(InvalidConfigError, match="normalization"):
        DriftConfig(normalization="both")
    with pytest.raises(InvalidConfigError):
        DriftConfig(per_temperature_norm_epsilon=0.0)


def test_displacement_field_matches_oracle():
    rng = RandomSource(9)
    pts, tgt = rng.normal((3, 4)), rng.normal((5, 4))
    np.testing.assert_allclose(displacement_field(pts, tgt, 0.7), naive_drift(pts, tgt, [], 0.7), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, mode=st.sampled_from(["one_sided", "two_sided"]))
def test_drift_is_translation_and_rotation_equivariant(seed, mode):
    # the Laplacian kernel only sees distances, so rigid motions of the whole batch commute with V
    rng = RandomSource(seed)
    pts, pos, neg = rng.normal((3, 3)), rng.normal((4, 3)), rng.normal((2, 3))
    r = sample_haar_rotation(rng)
    t = rng.normal(3)
    v = single_temperature_drift(DriftBatch(pts, pos, neg), 0.5, mode)
    moved = single_temperature_drift(DriftBatch(pts @ r.T + t, pos @ r.T + t, neg @ r.T + t), 0.5, mode)
    np.testing.assert_allclose(moved, v @ r.T, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_positive_weights_form_a_distribution(seed):
    rng = RandomSource(seed)
    w = kernel_weights(rng.normal(4), rng.normal((6, 4)), float(0.05 + rng.uniform()))
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_drift_invariant_to_target_order(seed):
    rng = RandomSource(seed)
    pts, pos, neg = rng.normal((3, 4)), rng.normal((5, 4)), rng.normal((4, 4))
    a = single_temperature_drift(DriftBatch(pts, pos, neg), 0.4)
    b = single_temperature_drift(DriftBatch(pts, pos[rng.permutation(5)], neg[rng.permutation(4)]), 0.4)
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- batch construction per space ------------------------------------------------


def _conf(rng, types):
    return center(Conformation(rng.normal((len(types), 3)), tuple(types)))


def test_cartesian_fixed_point():
    x = _conf(RandomSource(10), (0, 1, 2))
    batch, _ = build_drift_batch([x], [x], [], DriftConfig(space="cartesian"))
    assert np.max(np.abs(single_temperature_drift(batch, 0.1))) < 1e-12


def test_embedded_rotated_target_gives_zero_drift():
    rng = RandomSource(11)
    x = _conf(rng, (0, 0, 1, 2))
    y = x.with_coords(x.coords @ sample_haar_rotation(rng))
    batch, _ = build_drift_batch([x], [y], [], DriftConfig(space="embedded"))
    assert np.max(np.abs(single_temperature_drift(batch, 0.05))) < 1e-10


def test_aligned_brute_force_targets_match_standalone():
    rng = RandomSource(12)
    types = (0, 0, 0)
    xs = [_conf(rng, types) for _ in range(2)]
    ys = [_conf(rng, types) for _ in range(3)]
    strategy = AlignStrategy("brute_force")
    batch, _ = build_drift_batch(xs, ys, [], DriftConfig(space="aligned", align_strategy=strategy))
    for i, x in enumerate(xs):
        expected = np.stack([t.reshape(-1) for t in aligned_targets(x, ys, strategy)])
        np.testing.assert_allclose(batch.pos_targets[i], expected, atol=1e-12)


def test_backmap_shapes_and_embedded_chain_rule():
    rng = RandomSource(13)
    types = (0, 1, 1)
    xs = np.stack([_conf(rng, types).coords for _ in range(2)])
    ys = np.stack([_conf(rng, types).coords for _ in range(3)])
    for space in ("cartesian", "aligned", "embedded"):
        batch, back = build_drift_batch_arrays(xs, ys, ys[:1], types, DriftConfig(space=space))
        cot = rng.normal(batch.points.shape)
        g = back.pullback(cot)
        assert g.shape == xs.shape
        if space == "embedded":
            # <cot, d embed> along a direction equals <pullback, direction>
            v = rng.normal(xs.shape)
            eps = 1e-6
            up, _ = build_drift_batch_arrays(xs + eps * v, ys, ys[:1], types, DriftConfig(space=space))
            dn, _ = build_drift_batch_arrays(xs - eps * v, ys, ys[:1], types, DriftConfig(space=space))
            fd = np.sum(cot * (up.points - dn.points)) / (2 * eps)
            assert fd == pytest.approx(np.sum(g * v), rel=1e-6)


def test_build_rejects_mixed_types():
    rng = RandomSource(14)
    x = _conf(rng, (0, 1))
    with pytest.raises(InvalidInputError):
        build_drift_batch([x], [_conf(rng, (1, 0))], [], DriftConfig())
    with pytest.raises(InvalidInputError):
        build_drift_batch([], [x], [], DriftConfig())
