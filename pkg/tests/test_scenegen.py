"""Tests for scene generation, label corruption, augmentation and splits."""

import math

import numpy as np
import pytest

from pseudobox_lab.data_format import CorruptionSpec, Scene, SceneSpec
from pseudobox_lab.exceptions import DatasetError, SceneOverconstrainedError
from pseudobox_lab.geometry import points_in_box, wrap_angle_residual
from pseudobox_lab.io import load_scenes
from pseudobox_lab.scenegen import (
    AugmentationDraw,
    apply_augmentation,
    augment_scene,
    corrupt_labels,
    generate_scene,
    make_split,
    open_dataset,
    subsample_points,
)


class TestGenerateScene:
    def test_deterministic(self, small_spec):
        a = generate_scene(small_spec, 5)
        b = generate_scene(small_spec, 5)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.gt_boxes, b.gt_boxes)
        np.testing.assert_array_equal(a.prov, b.prov)

    def test_indices_differ(self, small_spec):
        a = generate_scene(small_spec, 0)
        b = generate_scene(small_spec, 1)
        assert not np.array_equal(a.gt_boxes, b.gt_boxes)

    def test_object_points_inside_their_box(self, small_scene):
        for i, box in enumerate(small_scene.gt_boxes):
            tagged = np.flatnonzero(small_scene.prov == i)
            assert len(tagged) >= 3
            inside = points_in_box(small_scene.points[tagged], box)
            assert len(inside) == len(tagged)

    def test_ground_points_outside_boxes(self, small_scene):
        ground = small_scene.points[small_scene.prov == -1]
        for box in small_scene.gt_boxes:
            assert len(points_in_box(ground, box)) == 0

    def test_boxes_within_range_and_on_ground(self, small_spec):
        for index in range(5):
            scene = generate_scene(small_spec, index)
            low, high = small_spec.object_count
            assert low <= scene.n_objects <= high
            distances = np.hypot(scene.gt_boxes[:, 0], scene.gt_boxes[:, 1])
            assert np.all(distances <= small_spec.radius_range[1])
            np.testing.assert_allclose(scene.gt_boxes[:, 2], 0.5 * scene.gt_boxes[:, 5])

    def test_far_objects_are_sparser(self):
        spec = SceneSpec(seed=3, object_count=(6, 6), radius_range=(5.0, 80.0), ground_points=0)
        scene = generate_scene(spec, 0)
        distances = np.hypot(scene.gt_boxes[:, 0], scene.gt_boxes[:, 1])
        counts = np.array([np.count_nonzero(scene.prov == i) for i in range(scene.n_objects)])
        near, far = np.argmin(distances), np.argmax(distances)
        assert counts[near] >= counts[far]

    def test_no_objects(self):
        scene = generate_scene(SceneSpec(object_count=(0, 0), ground_points=50), 0)
        assert scene.n_objects == 0
        assert np.all(scene.prov == -1)

    def test_overconstrained(self):
        spec = SceneSpec(object_count=(40, 40), radius_range=(5.0, 6.0))
        with pytest.raises(SceneOverconstrainedError):
            generate_scene(spec, 0)

    def test_negative_index(self, small_spec):
        with pytest.raises(ValueError):
            generate_scene(small_spec, -1)


class TestCorruption:
    def test_fraction_and_errors(self):
        spec = SceneSpec(seed=2, object_count=(10, 10), radius_range=(5.0, 80.0))
        scene = generate_scene(spec, 0)
        corrupted = corrupt_labels(scene, CorruptionSpec(fraction=0.3, seed=4))
        changed = np.any(corrupted.pseudo_boxes != scene.gt_boxes, axis=1)
        assert np.count_nonzero(changed) == 3
        np.testing.assert_array_equal(corrupted.injected_errors[~changed], 0.0)
        errors = np.abs(corrupted.pseudo_boxes - scene.gt_boxes)
        np.testing.assert_allclose(corrupted.injected_errors[:, :6], errors[:, :6])
        np.testing.assert_allclose(
            corrupted.injected_errors[:, 6],
            wrap_angle_residual(corrupted.pseudo_boxes[:, 6], scene.gt_boxes[:, 6]),
        )
        assert np.all(corrupted.pseudo_boxes[:, 3:6] > 0)

    def test_zero_fraction_is_identity(self, small_scene):
        corrupted = corrupt_labels(small_scene, CorruptionSpec(fraction=0.0))
        np.testing.assert_array_equal(corrupted.pseudo_boxes, small_scene.gt_boxes)
        np.testing.assert_array_equal(corrupted.injected_errors, 0.0)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            CorruptionSpec(fraction=1.5)
        with pytest.raises(ValueError):
            CorruptionSpec(stds=(0.1, 0.1))


class TestAugmentation:
    def test_identity_draw(self, small_scene):
        out = apply_augmentation(small_scene, AugmentationDraw())
        np.testing.assert_array_equal(out.points, small_scene.points)

    def test_containment_preserved(self, small_scene, rng):
        scene = small_scene.replace(pseudo_boxes=small_scene.gt_boxes)
        for _ in range(5):
            out = augment_scene(scene, rng)
            for i, box in enumerate(out.gt_boxes):
                tagged = np.flatnonzero(out.prov == i)
                assert len(points_in_box(out.points[tagged], box)) == len(tagged)
            np.testing.assert_allclose(out.pseudo_boxes, out.gt_boxes)

    def test_flip_mirrors_yaw(self):
        scene = Scene(points=np.zeros((1, 3)), gt_boxes=[[10.0, 5.0, 1.0, 4.0, 2.0, 1.5, 0.4]])
        out = apply_augmentation(scene, AugmentationDraw(flip=True))
        np.testing.assert_allclose(out.gt_boxes[0], [10.0, -5.0, 1.0, 4.0, 2.0, 1.5, -0.4])

    def test_rotation_and_scale(self):
        scene = Scene(points=[[1.0, 0.0, 0.5]], gt_boxes=[[1.0, 0.0, 0.5, 4.0, 2.0, 1.0, 0.0]])
        out = apply_augmentation(scene, AugmentationDraw(rotation=math.pi / 2, scale=2.0))
        np.testing.assert_allclose(out.points[0], [0.0, 2.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(out.gt_boxes[0], [0.0, 2.0, 1.0, 8.0, 4.0, 2.0, math.pi / 2], atol=1e-12)


class TestSubsample:
    def test_exact_count_without_replacement(self, small_scene, rng):
        out = subsample_points(small_scene, 50, rng)
        assert out.n_points == 50
        rows = {tuple(p) for p in out.points}
        assert len(rows) == 50

    def test_pads_small_scenes(self, small_scene, rng):
        n = small_scene.n_points + 17
        out = subsample_points(small_scene, n, rng)
        assert out.n_points == n
        # Every original point is kept at least once
        original = {tuple(p) for p in small_scene.points}
        assert original <= {tuple(p) for p in out.points}

    def test_provenance_travels(self, small_scene, rng):
        out = subsample_points(small_scene, 80, rng)
        lookup = {tuple(p): t for p, t in zip(small_scene.points, small_scene.prov)}
        assert all(lookup[tuple(p)] == t for p, t in zip(out.points, out.prov))

    def test_no_shuffle_keeps_file_order(self, small_scene, rng):
        out = subsample_points(small_scene, 40, rng, shuffle=False)
        positions = [
            int(np.flatnonzero(np.all(small_scene.points == p, axis=1))[0]) for p in out.points
        ]
        assert positions == sorted(positions)

    def test_empty_scene(self, rng):
        with pytest.raises(DatasetError):
            subsample_points(Scene(points=np.zeros((0, 3)), gt_boxes=np.zeros((0, 7))), 10, rng)


class TestSplit:
    def test_disjoint_indices_and_manifest(self, small_dataset):
        handle = open_dataset(small_dataset.root)
        train = load_scenes(handle.train_path)
        test = load_scenes(handle.test_path)
        assert [s.index for s in train] == [0, 1, 2, 3]
        assert [s.index for s in test] == [4, 5]
        assert handle.manifest["train_indices"] == [0, 4]
        assert handle.manifest["test_indices"] == [4, 6]
        assert handle.manifest_hash == small_dataset.manifest_hash

    def test_reproducible_files(self, small_spec, tmp_path):
        a = make_split(small_spec, 2, 1, tmp_path / "a")
        b = make_split(small_spec, 2, 1, tmp_path / "b")
        assert a.train_path.read_bytes() == b.train_path.read_bytes()
        assert a.manifest_hash == b.manifest_hash

    def test_corrupted_split_records_errors(self, small_spec, tmp_path):
        handle = make_split(small_spec, 2, 1, tmp_path / "c", CorruptionSpec(fraction=1.0))
        train = load_scenes(handle.train_path)
        test = load_scenes(handle.test_path)
        assert all(s.injected_errors is not None for s in train)
        assert all(s.injected_errors is None and len(s.pseudo_boxes) == 0 for s in test)
        assert handle.manifest["corruption"]["fraction"] == 1.0

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(DatasetError):
            open_dataset(tmp_path / "nothing")
