"""
7-DoF box algebra.

Corners, point containment, angle residuals, rotated bird's-eye-view IoU
and 3D IoU. Every function is pure and accepts either ``Box7`` records or
7-element sequences ``(x, y, z, l, w, h, theta)``.
"""

import math
from typing import Iterable, List

import numpy as np

from .data_format import BevPolygon, as_box_array, as_box_matrix, wrap_angle

__all__ = [
    "box_corners_bev",
    "bev_iou",
    "iou_3d",
    "points_in_box",
    "points_in_boxes",
    "wrap_angle",
    "wrap_angle_residual",
    "wrap_half_turn",
    "bev_iou_matrix",
    "iou_3d_matrix",
    "clip_convex_polygon",
    "polygon_area",
]

# Tolerance for the inclusive box boundary
_BOUNDARY_TOL = 1e-9


def _corner_array(box: np.ndarray) -> np.ndarray:
    x, y, _, l, w, _, theta = box
    local = 0.5 * np.array([[l, -w], [l, w], [-l, w], [-l, -w]])
    c, s = math.cos(theta), math.sin(theta)
    rotation = np.array([[c, -s], [s, c]])
    return local @ rotation.T + np.array([x, y])


def box_corners_bev(box) -> BevPolygon:
    """
    Footprint corners of a box, counterclockwise.

    Parameters
    ----------
    box : Box7 or sequence of float
        Box to project

    Returns
    -------
    BevPolygon
        The four footprint vertices rotated by theta about (x, y)
    """
    return BevPolygon(_corner_array(as_box_array(box)))


def polygon_area(vertices: np.ndarray) -> float:
    """Unsigned shoelace area of a polygon given as (k, 2) vertices."""
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """
    Intersect two convex counterclockwise polygons (Sutherland-Hodgman).

    Parameters
    ----------
    subject, clip : np.ndarray
        Vertex arrays of shape (k, 2)

    Returns
    -------
    np.ndarray
        Vertices of the intersection, possibly empty
    """
    output: List[np.ndarray] = [p for p in subject]
    n_clip = len(clip)
    for i in range(n_clip):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n_clip]
        edge = b - a
        inputs, output = output, []
        prev = inputs[-1]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        for cur in inputs:
            cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    output.append(_segment_cross(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0.0:
                output.append(_segment_cross(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    if not output:
        return np.zeros((0, 2))
    return np.vstack(output)


def _segment_cross(p, q, side_p, side_q) -> np.ndarray:
    t = side_p / (side_p - side_q)
    return p + t * (q - p)


def _bev_intersection(a: np.ndarray, b: np.ndarray) -> float:
    overlap = clip_convex_polygon(_corner_array(a), _corner_array(b))
    return polygon_area(overlap)


def bev_iou(a, b) -> float:
    """
    Rotated footprint IoU of two boxes.

    Parameters
    ----------
    a, b : Box7 or sequence of float
        Boxes to compare

    Returns
    -------
    float
        Intersection over union of the footprints, in [0, 1]
    """
    a, b = as_box_array(a), as_box_array(b)
    if np.array_equal(a, b):
        return 1.0
    inter = _bev_intersection(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return float(min(1.0, inter / union))


def iou_3d(a, b) -> float:
    """
    Yaw-only 3D IoU: BEV intersection times vertical overlap over union volume.

    Parameters
    ----------
    a, b : Box7 or sequence of float
        Boxes to compare

    Returns
    -------
    float
        Volumetric intersection over union, in [0, 1]
    """
    a, b = as_box_array(a), as_box_array(b)
    if np.array_equal(a, b):
        return 1.0
    top = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    bottom = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    overlap_h = top - bottom
    if overlap_h <= 0.0:
        return 0.0
    inter = _bev_intersection(a, b) * overlap_h
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return float(min(1.0, inter / union))


def _local_coordinates(points: np.ndarray, box: np.ndarray) -> np.ndarray:
    shifted = points - box[:3]
    c, s = math.cos(box[6]), math.sin(box[6])
    local_x = c * shifted[:, 0] + s * shifted[:, 1]
    local_y = -s * shifted[:, 0] + c * shifted[:, 1]
    return np.column_stack([local_x, local_y, shifted[:, 2]])


def points_in_box(points, box) -> np.ndarray:
    """
    Indices of points inside an oriented box; the boundary counts as inside.

    Parameters
    ----------
    points : array_like
        Points of shape (n, 3)
    box : Box7 or sequence of float
        The oriented box

    Returns
    -------
    np.ndarray
        Sorted integer indices of the contained points
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    box = as_box_array(box)
    local = _local_coordinates(points, box)
    half = 0.5 * box[3:6] + _BOUNDARY_TOL
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.flatnonzero(inside)


def points_in_boxes(points, boxes) -> np.ndarray:
    """Boolean containment matrix of shape (n_points, n_boxes)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    boxes = as_box_matrix(boxes)
    inside = np.zeros((len(points), len(boxes)), dtype=bool)
    for j, box in enumerate(boxes):
        inside[points_in_box(points, box), j] = True
    return inside


def wrap_half_turn(residual):
    """
    Signed angle residual wrapped to [-pi/2, pi/2).

    Rectangles are symmetric under a half turn, so residuals differing by a
    multiple of pi describe the same orientation error.
    """
    residual = np.asarray(residual, dtype=float)
    wrapped = np.mod(residual + 0.5 * math.pi, math.pi) - 0.5 * math.pi
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def wrap_angle_residual(tp, ta):
    """
    Orientation residual modulo pi.

    Parameters
    ----------
    tp, ta : float or array_like
        Angles in radians

    Returns
    -------
    float or np.ndarray
        min over integer k of |tp - ta + k*pi|, in [0, pi/2]
    """
    residual = np.abs(wrap_half_turn(np.asarray(tp, dtype=float) - np.asarray(ta, dtype=float)))
    if np.ndim(residual) == 0:
        return float(residual)
    return residual


def bev_iou_matrix(boxes_a: Iterable, boxes_b: Iterable) -> np.ndarray:
    """
    Pairwise BEV IoU, skipping pairs whose circumscribed circles are disjoint.

    Parameters
    ----------
    boxes_a, boxes_b : array_like
        Box arrays of shape (m, 7) and (k, 7)

    Returns
    -------
    np.ndarray
        IoU matrix of shape (m, k)
    """
    a, b = as_box_matrix(boxes_a), as_box_matrix(boxes_b)
    result = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return result
    radius_a = 0.5 * np.hypot(a[:, 3], a[:, 4])
    radius_b = 0.5 * np.hypot(b[:, 3], b[:, 4])
    gap = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    candidates = np.argwhere(gap < radius_a[:, None] + radius_b[None, :])
    for i, j in candidates:
        result[i, j] = bev_iou(a[i], b[j])
    return result


def iou_3d_matrix(boxes_a: Iterable, boxes_b: Iterable) -> np.ndarray:
    """Pairwise 3D IoU with the same circle prefilter as ``bev_iou_matrix``."""
    a, b = as_box_matrix(boxes_a), as_box_matrix(boxes_b)
    result = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return result
    radius_a = 0.5 * np.hypot(a[:, 3], a[:, 4])
    radius_b = 0.5 * np.hypot(b[:, 3], b[:, 4])
    gap = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    for i, j in np.argwhere(gap < radius_a[:, None] + radius_b[None, :]):
        result[i, j] = iou_3d(a[i], b[j])
    return result
