"""Tests for the two-branch network, its backward pass and the optimizer."""

import numpy as np
import pytest

from pseudobox_lab.exceptions import NumericalOverflowError, TapeMismatchError
from pseudobox_lab.nnet import (
    AdamState,
    ModelParams,
    NetworkShape,
    adam_step,
    backward,
    finite_diff_check,
    forward_dense,
    global_norm,
    init_params,
    linear_backward,
    linear_forward,
    point_features,
)
from pseudobox_lab.scenegen import subsample_points

from conftest import tiny_config


@pytest.fixture
def check_scene(small_scene):
    """A 48-point scene whose pseudo boxes are the ground truth."""
    scene = small_scene.replace(pseudo_boxes=small_scene.gt_boxes)
    return subsample_points(scene, 48, np.random.default_rng(7), shuffle=False)


def _zero_head(params: ModelParams) -> ModelParams:
    out = params.copy()
    for branch in ("primary", "auxiliary"):
        out.arrays[f"{branch}.head.1.weight"][:] = 0.0
        out.arrays[f"{branch}.head.1.bias"][:] = 0.0
    return out


class TestNetworkShape:
    @pytest.mark.parametrize(
        "gamma, width, expected",
        [(0.5, 12, 6), (0.5, 13, 7), (0.25, 12, 3), (1.0, 12, 12), (2.0, 12, 24), (0.01, 12, 1)],
    )
    def test_scaled_width_is_ceiling(self, gamma, width, expected):
        assert NetworkShape(gamma=gamma).scaled(width) == expected

    def test_parameter_shapes_with_split(self):
        params = init_params((8, 12), gamma=0.5, head_width=12, split_depth=1)
        arrays = params.arrays
        assert arrays["trunk.0.weight"].shape == (9, 8)
        assert arrays["primary.trunk.1.weight"].shape == (8, 12)
        assert arrays["auxiliary.trunk.1.weight"].shape == (8, 6)
        assert arrays["primary.head.0.weight"].shape == (24, 12)
        assert arrays["auxiliary.head.0.weight"].shape == (12, 6)
        assert arrays["auxiliary.head.1.weight"].shape == (6, 8)
        assert "trunk.1.weight" not in arrays

    def test_fully_shared_trunk(self):
        params = init_params((8, 12), gamma=0.5, head_width=12)
        assert not any(".trunk." in name for name in params.arrays)
        assert params.arrays["auxiliary.head.0.weight"].shape == (24, 6)

    def test_invalid_split_depth(self):
        with pytest.raises(ValueError):
            NetworkShape(trunk_widths=(8, 12), split_depth=3)

    def test_init_is_deterministic(self):
        a = init_params((8, 12), seed=3, head_width=12)
        b = init_params((8, 12), seed=3, head_width=12)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
        assert all(np.all(a.arrays[k] == 0) for k in a.arrays if k.endswith("bias"))

    def test_without_branch(self):
        params = init_params((8, 12), head_width=12, split_depth=1)
        primary_only = params.without_branch("auxiliary")
        assert not any(k.startswith("auxiliary.") for k in primary_only.arrays)
        assert "trunk.0.weight" in primary_only.arrays
        assert primary_only.n_parameters < params.n_parameters


class TestLinear:
    def test_backward_closed_form(self, rng):
        x = rng.normal(size=(5, 3))
        weight = rng.normal(size=(3, 4))
        bias = rng.normal(size=4)
        dout = rng.normal(size=(5, 4))
        np.testing.assert_allclose(linear_forward(x, weight, bias), x @ weight + bias)
        dx, dweight, dbias = linear_backward(x, weight, dout)
        np.testing.assert_allclose(dx, dout @ weight.T)
        np.testing.assert_allclose(dweight, x.T @ dout)
        np.testing.assert_allclose(dbias, dout.sum(axis=0))


class TestPointFeatures:
    def test_raw_coordinates(self):
        points = np.array([[40.0, -20.0, 2.0]])
        np.testing.assert_allclose(point_features(points, local_features=False), [[1.0, -0.5, 0.05]])

    def test_local_features(self):
        points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [30.0, 0.0, 0.0]])
        features = point_features(points, radius=2.0)
        assert features.shape == (3, 9)
        np.testing.assert_allclose(features[0, 3:6], [0.5, 0.0, 0.0])
        np.testing.assert_allclose(features[1, 3:6], [-0.5, 0.0, 0.0])
        np.testing.assert_allclose(features[0, 6:], [0.5, 0.0, 0.0])
        # An isolated point is its own neighbourhood
        np.testing.assert_allclose(features[2, 3:], 0.0)


class TestForward:
    def test_decoding_at_zero_head(self, small_scene):
        params = _zero_head(init_params((8, 12), head_width=12))
        features = point_features(small_scene.points)
        pred_p, pred_a, _ = forward_dense(params, small_scene.points, features, (4.0, 2.0, 1.6))
        for pred in (pred_p, pred_a):
            np.testing.assert_allclose(pred.boxes[:, :3], small_scene.points)
            np.testing.assert_allclose(pred.boxes[:, 3:6], np.tile([4.0, 2.0, 1.6], (small_scene.n_points, 1)))
            np.testing.assert_allclose(pred.boxes[:, 6], 0.0)
            np.testing.assert_allclose(pred.objectness, 0.5)

    def test_single_branch_matches_full(self, small_scene):
        params = init_params((8, 12), head_width=12, split_depth=1, seed=2)
        features = point_features(small_scene.points)
        full_p, _, _ = forward_dense(params, small_scene.points, features)
        only_p, only_a, _ = forward_dense(
            params.without_branch("auxiliary"), small_scene.points, features, branches=("primary",)
        )
        assert only_a is None
        np.testing.assert_array_equal(only_p.boxes, full_p.boxes)
        np.testing.assert_array_equal(only_p.objectness, full_p.objectness)

    def test_feature_width_mismatch(self, small_scene):
        params = init_params((8, 12), head_width=12)
        with pytest.raises(ValueError):
            forward_dense(params, small_scene.points)

    def test_overflow_raises(self, small_scene):
        params = init_params((8, 12), head_width=12, input_width=3)
        params.arrays["primary.head.1.bias"][3] = 1000.0
        with pytest.raises(NumericalOverflowError):
            forward_dense(params, small_scene.points)

    def test_empty_points(self):
        with pytest.raises(ValueError):
            forward_dense(init_params((8,), head_width=4, input_width=3), np.zeros((0, 3)))


class TestBackward:
    def test_wrong_gradient_shape(self, small_scene):
        params = init_params((8, 12), head_width=12, input_width=3)
        _, _, tape = forward_dense(params, small_scene.points)
        with pytest.raises(TapeMismatchError):
            backward(tape, {"primary": np.zeros((small_scene.n_points, 7))})

    def test_unrecorded_branch(self, small_scene):
        params = init_params((8, 12), head_width=12, input_width=3)
        _, _, tape = forward_dense(params, small_scene.points, branches=("primary",))
        with pytest.raises(TapeMismatchError):
            backward(tape, {"auxiliary": np.zeros((small_scene.n_points, 8))})

    def test_foreign_parameters(self, small_scene):
        params = init_params((8, 12), head_width=12, input_width=3)
        other = init_params((8, 16), head_width=12, input_width=3)
        _, _, tape = forward_dense(params, small_scene.points)
        grads = {"primary": np.zeros((small_scene.n_points, 8))}
        with pytest.raises(TapeMismatchError):
            backward(tape, grads, other)

    def test_gradient_keys_cover_parameters(self, small_scene):
        params = init_params((8, 12), head_width=12, input_width=3, split_depth=1)
        _, _, tape = forward_dense(params, small_scene.points)
        ones = np.ones((small_scene.n_points, 8))
        grads = backward(tape, {"primary": ones, "auxiliary": ones}, params)
        assert set(grads) == set(params.arrays)
        assert all(grads[k].shape == params.arrays[k].shape for k in grads)


class TestFiniteDifference:
    @pytest.mark.parametrize(
        "changes",
        [
            {},
            {"lam": 0.0, "mu": 0.0},
            {"lam": 0.1, "granularity": "box", "gamma": 0.25},
            {"granularity": "cloud", "loss_kind": "smooth_l1"},
            {"uncertainty_mode": "volume"},
            {"stop_grad_uncertainty": True, "split_depth": 1},
        ],
    )
    def test_backward_matches_central_differences(self, check_scene, changes):
        cfg = tiny_config(**changes)
        params = init_params(
            cfg.trunk_widths,
            cfg.gamma,
            seed=5,
            input_width=cfg.input_width,
            head_width=cfg.head_width,
            split_depth=cfg.split_depth,
        )
        assert finite_diff_check(params, check_scene, cfg, fraction=0.1) <= 1e-4

    def test_detects_wrong_gradients(self, check_scene):
        cfg = tiny_config()
        params = init_params(cfg.trunk_widths, cfg.gamma, seed=5, head_width=cfg.head_width)
        assert finite_diff_check(params, check_scene, cfg, fraction=0.3, grad_fault=2.0) > 0.1

    def test_reports_sampled_and_skipped_counts(self, check_scene):
        cfg = tiny_config()
        params = init_params(cfg.trunk_widths, cfg.gamma, seed=5, head_width=cfg.head_width)
        error, sampled, skipped = finite_diff_check(params, check_scene, cfg, fraction=0.1, return_counts=True)
        total = sum(a.size for a in params.arrays.values())
        assert sampled == max(8, round(0.1 * total))
        assert 0 <= skipped < sampled
        assert error == finite_diff_check(params, check_scene, cfg, fraction=0.1)

    def test_rejects_large_batches(self, small_scene):
        cfg = tiny_config()
        params = init_params(cfg.trunk_widths, cfg.gamma, head_width=cfg.head_width)
        with pytest.raises(ValueError):
            finite_diff_check(params, small_scene, cfg)


class TestAdam:
    def test_zero_gradient_applies_weight_decay_only(self):
        params = init_params((4,), head_width=4, input_width=3, seed=1)
        new, state, norm = adam_step(params, {}, AdamState(), lr=0.01, wd=0.1)
        assert norm == 0.0
        assert state.step == 1
        for name, array in params.arrays.items():
            np.testing.assert_allclose(new.arrays[name], array * (1.0 - 0.001))

    def test_inputs_not_modified(self):
        params = init_params((4,), head_width=4, input_width=3, seed=1)
        before = params.copy()
        grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
        adam_step(params, grads, AdamState(), lr=0.01, wd=0.0)
        assert all(np.array_equal(before.arrays[k], params.arrays[k]) for k in params.arrays)

    def test_first_step_moves_by_learning_rate(self):
        params = init_params((4,), head_width=4, input_width=3, seed=1)
        grads = {k: np.full_like(v, 0.5) for k, v in params.arrays.items()}
        new, _, _ = adam_step(params, grads, AdamState(), lr=0.01, wd=0.0, clip=None)
        for name, array in params.arrays.items():
            np.testing.assert_allclose(new.arrays[name], array - 0.01, atol=1e-9)

    def test_clipping_scales_moments(self):
        params = init_params((4,), head_width=4, input_width=3, seed=1)
        grads = {k: np.full_like(v, 3.0) for k, v in params.arrays.items()}
        norm = global_norm(grads)
        assert norm > 10.0
        _, state, reported = adam_step(params, grads, AdamState(), lr=0.01, wd=0.0, clip=10.0)
        assert reported == pytest.approx(norm)
        clipped = {k: v * (10.0 / norm) for k, v in grads.items()}
        for name in params.arrays:
            np.testing.assert_allclose(state.m[name], 0.1 * clipped[name])
        assert global_norm({k: m / 0.1 for k, m in state.m.items()}) == pytest.approx(10.0)

    def test_shape_mismatch(self):
        params = init_params((4,), head_width=4, input_width=3)
        with pytest.raises(ValueError):
            adam_step(params, {"trunk.0.weight": np.zeros(2)}, AdamState(), lr=0.01, wd=0.0)

    def test_global_norm(self):
        assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)
