"""Tests for ground removal, DBSCAN, rectangle fitting and seed boxes."""

import math

import numpy as np
import pytest

from pseudobox_lab.data_format import Scene, SceneSpec
from pseudobox_lab.exceptions import DegenerateClusterError
from pseudobox_lab.geometry import bev_iou, points_in_box
from pseudobox_lab.pseudolabel import (
    ClusterParams,
    dbscan,
    fit_box7,
    generate_seeds,
    min_area_rectangle,
    remove_ground,
    seed_scenes,
)
from pseudobox_lab.scenegen import generate_scene


def _brute_force_area(xy, steps=20000):
    """Smallest bounding-box area over a fine grid of orientations."""
    best = math.inf
    for angle in np.linspace(0.0, 0.5 * math.pi, steps, endpoint=False):
        u = np.array([math.cos(angle), math.sin(angle)])
        v = np.array([-u[1], u[0]])
        along, across = xy @ u, xy @ v
        best = min(best, np.ptp(along) * np.ptp(across))
    return best


class TestRemoveGround:
    def test_strictly_above(self):
        points = np.array([[0, 0, 0.1], [0, 0, 0.2], [0, 0, 0.3]])
        np.testing.assert_array_equal(remove_ground(points, 0.2), [2])


class TestDbscan:
    def test_two_blobs_and_noise(self, rng):
        a = rng.normal([0, 0, 1], 0.1, size=(20, 3))
        b = rng.normal([10, 0, 1], 0.1, size=(15, 3))
        noise = np.array([[50.0, 50.0, 1.0]])
        labels = dbscan(np.vstack([a, b, noise]), eps=0.8, min_pts=3)
        assert len(set(labels[:20])) == 1
        assert len(set(labels[20:35])) == 1
        assert labels[0] != labels[20]
        assert labels[-1] == -1

    def test_labels_follow_index_order(self, rng):
        a = rng.normal([0, 0, 1], 0.1, size=(10, 3))
        b = rng.normal([10, 0, 1], 0.1, size=(10, 3))
        assert dbscan(np.vstack([b, a]), 0.8, 3)[0] == 0
        assert dbscan(np.vstack([a, b]), 0.8, 3)[0] == 0

    def test_chain_joins(self):
        chain = np.column_stack([np.arange(10) * 0.5, np.zeros(10), np.ones(10)])
        labels = dbscan(chain, eps=0.6, min_pts=2)
        assert np.all(labels == 0)

    def test_min_pts_counts_self(self):
        lonely = np.array([[0.0, 0.0, 1.0]])
        assert dbscan(lonely, eps=1.0, min_pts=1)[0] == 0
        assert dbscan(lonely, eps=1.0, min_pts=2)[0] == -1

    def test_border_point_sets_cluster_order(self):
        # index 0 is a border point of the cluster whose first core point comes last
        points = np.array(
            [
                [0.0, 0.0, 1.0],
                [10.0, 0.0, 1.0],
                [10.1, 0.0, 1.0],
                [10.2, 0.0, 1.0],
                [0.5, 0.0, 1.0],
                [0.6, 0.0, 1.0],
                [0.7, 0.0, 1.0],
            ]
        )
        np.testing.assert_array_equal(dbscan(points, eps=0.55, min_pts=3), [0, 1, 1, 1, 0, 0, 0])

    def test_ids_appear_in_index_order(self, rng):
        centers = np.array([[0, 0, 1], [8, 0, 1], [0, 8, 1], [8, 8, 1]], dtype=float)
        points = np.vstack([rng.normal(c, 0.1, size=(12, 3)) for c in centers])
        labels = dbscan(points[rng.permutation(len(points))], eps=0.8, min_pts=3)
        _, first = np.unique(labels, return_index=True)
        np.testing.assert_array_equal(labels[np.sort(first)], [0, 1, 2, 3])

    def test_empty(self):
        assert len(dbscan(np.zeros((0, 3)), 1.0, 3)) == 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 3)), 0.0, 3)


class TestMinAreaRectangle:
    def test_axis_aligned_rectangle(self):
        xy = np.array([[0, 0], [4, 0], [4, 2], [0, 2], [1, 1], [3, 0.5]], dtype=float)
        cx, cy, length, width, yaw = min_area_rectangle(xy)
        assert (cx, cy) == pytest.approx((2.0, 1.0))
        assert (length, width) == pytest.approx((4.0, 2.0))
        assert abs(yaw) == pytest.approx(0.0, abs=1e-12)

    def test_rotated_rectangle(self, rng):
        local = rng.uniform([-2.0, -0.8], [2.0, 0.8], size=(200, 2))
        local = np.vstack([local, [[-2, -0.8], [2, -0.8], [2, 0.8], [-2, 0.8]]])
        angle = 0.6
        rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        xy = local @ rotation.T + [5.0, -3.0]
        cx, cy, length, width, yaw = min_area_rectangle(xy)
        assert (cx, cy) == pytest.approx((5.0, -3.0), abs=1e-9)
        assert (length, width) == pytest.approx((4.0, 1.6), abs=1e-9)
        assert yaw == pytest.approx(angle, abs=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        xy = rng.normal(size=(rng.integers(3, 40), 2)) * rng.uniform(0.5, 3.0, 2)
        cx, cy, length, width, yaw = min_area_rectangle(xy)
        brute = _brute_force_area(xy)
        assert length * width <= brute + 1e-9
        assert length * width == pytest.approx(brute, rel=1e-3)
        assert length >= width
        assert -0.5 * math.pi <= yaw < 0.5 * math.pi
        box = [cx, cy, 0.0, length, width, 1.0, yaw]
        points = np.column_stack([xy, np.zeros(len(xy))])
        assert len(points_in_box(points, box)) == len(xy)

    def test_collinear_is_degenerate(self):
        xy = np.column_stack([np.arange(5.0), 2.0 * np.arange(5.0)])
        with pytest.raises(DegenerateClusterError):
            min_area_rectangle(xy)

    def test_too_few_points(self):
        with pytest.raises(DegenerateClusterError):
            min_area_rectangle(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]))


class TestFitBox7:
    def test_height_range(self):
        pts = np.array([[0, 0, 0.5], [2, 0, 1.5], [2, 1, 0.7], [0, 1, 1.0]], dtype=float)
        box = fit_box7(pts)
        assert box[2] == pytest.approx(1.0)
        assert box[5] == pytest.approx(1.0)
        assert (box[3], box[4]) == pytest.approx((2.0, 1.0))

    def test_flat_cluster_gets_min_height(self):
        pts = np.array([[0, 0, 1.0], [2, 0, 1.0], [2, 1, 1.0]], dtype=float)
        assert fit_box7(pts)[5] > 0


class TestSeeds:
    def test_seeds_recover_near_objects(self):
        spec = SceneSpec(seed=1, object_count=(3, 3), radius_range=(6.0, 15.0))
        scene = generate_scene(spec, 0)
        seeds = generate_seeds(scene, ClusterParams())
        assert len(seeds) >= 1
        assert max(bev_iou(gt, s) for gt in scene.gt_boxes for s in seeds) > 0.1
        for seed in seeds:
            gaps = np.hypot(scene.gt_boxes[:, 0] - seed[0], scene.gt_boxes[:, 1] - seed[1])
            reach = 0.5 * np.hypot(scene.gt_boxes[:, 3], scene.gt_boxes[:, 4])
            assert np.min(gaps - reach) < 3.0
        distances = np.hypot(seeds[:, 0], seeds[:, 1])
        assert np.all(np.diff(distances) >= 0)

    def test_ground_only_scene(self):
        points = np.column_stack([np.linspace(-10, 10, 50), np.zeros(50), np.zeros(50)])
        scene = Scene(points=points, gt_boxes=np.zeros((0, 7)))
        assert generate_seeds(scene, ClusterParams()).shape == (0, 7)

    def test_seed_scenes_keeps_order_and_clears_errors(self, small_spec):
        scenes = [generate_scene(small_spec, i) for i in range(3)]
        seeded = seed_scenes(scenes, ClusterParams())
        assert [s.index for s in seeded] == [0, 1, 2]
        assert all(s.injected_errors is None for s in seeded)
        np.testing.assert_array_equal(seeded[0].pseudo_boxes, generate_seeds(scenes[0], ClusterParams()))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            ClusterParams(eps=0.0)
        with pytest.raises(ValueError):
            ClusterParams(min_pts=0)
