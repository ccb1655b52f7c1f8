"""
Clustering-based seed pseudo boxes.

Ground removal by a height threshold, DBSCAN over the remaining points and
a minimum-area rotated rectangle per cluster. The resulting boxes seed the
first training round.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import List

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from sklearn.cluster import DBSCAN

from .data_format import Scene
from .exceptions import DegenerateClusterError
from .geometry import wrap_half_turn

logger = logging.getLogger(__name__)

# Smallest height assigned to a flat cluster (m)
MIN_HEIGHT = 1e-3


@dataclass
class ClusterParams:
    """
    Parameters of seed generation.

    Attributes
    ----------
    ground_threshold : float
        Points at or below this height (m) are ground
    eps : float
        DBSCAN neighbourhood radius (m)
    min_pts : int
        DBSCAN core-point neighbourhood size, the point itself included
    min_cluster_size : int
        Smallest cluster that is turned into a box
    """
    ground_threshold: float = 0.2
    eps: float = 0.8
    min_pts: int = 3
    min_cluster_size: int = 3

    def __post_init__(self):
        if not math.isfinite(self.ground_threshold):
            raise ValueError("ground_threshold must be finite")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be at least 1")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def remove_ground(points, threshold: float = 0.2) -> np.ndarray:
    """
    Indices of points strictly above the ground threshold.

    Parameters
    ----------
    points : array_like
        Points of shape (n, 3)
    threshold : float, optional
        Ground height threshold in meters (default: 0.2)

    Returns
    -------
    np.ndarray
        Indices of foreground points
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.flatnonzero(points[:, 2] > threshold)


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """
    Density-based clustering over 3D Euclidean distance.

    Cluster ids are renumbered by the smallest point index in each cluster,
    so labels are deterministic for a fixed point order. A neighbourhood
    includes the point itself.

    Parameters
    ----------
    points : array_like
        Points of shape (n, 3)
    eps : float
        Neighbourhood radius
    min_pts : int
        Minimum neighbourhood size of a core point

    Returns
    -------
    np.ndarray
        Cluster label per point, -1 for noise
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("dbscan needs eps > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    labels = np.full(len(points), -1, dtype=np.int64)
    if len(points) == 0:
        return labels
    raw = DBSCAN(eps=eps, min_samples=min_pts).fit(points).labels_
    clustered = raw >= 0
    if clustered.any():
        ids, first = np.unique(raw[clustered], return_index=True)
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(ids))
        labels[clustered] = rank[np.searchsorted(ids, raw[clustered])]
    return labels


def _hull_vertices(xy: np.ndarray) -> np.ndarray:
    unique = np.unique(xy, axis=0)
    if len(unique) < 3:
        raise DegenerateClusterError()
    try:
        hull = ConvexHull(unique)
    except QhullError as e:
        raise DegenerateClusterError() from e
    if hull.volume <= 0.0:
        raise DegenerateClusterError()
    return unique[hull.vertices]


def min_area_rectangle(xy) -> tuple:
    """
    Minimum-area enclosing rectangle of 2D points via hull edge directions.

    Parameters
    ----------
    xy : array_like
        Points of shape (n, 2)

    Returns
    -------
    tuple
        (center_x, center_y, length, width, yaw) with length >= width and
        yaw along the long side, wrapped to [-pi/2, pi/2)

    Raises
    ------
    DegenerateClusterError
        If the points are collinear or fewer than three distinct points
    """
    hull = _hull_vertices(np.asarray(xy, dtype=float).reshape(-1, 2))
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    keep = lengths > 0
    directions = edges[keep] / lengths[keep, None]

    best = None
    for u in directions:
        v = np.array([-u[1], u[0]])
        along, across = hull @ u, hull @ v
        a0, a1 = along.min(), along.max()
        b0, b1 = across.min(), across.max()
        area = (a1 - a0) * (b1 - b0)
        if best is None or area < best[0]:
            best = (area, u, v, a0, a1, b0, b1)

    _, u, v, a0, a1, b0, b1 = best
    center = u * 0.5 * (a0 + a1) + v * 0.5 * (b0 + b1)
    extent_u, extent_v = a1 - a0, b1 - b0
    yaw = math.atan2(u[1], u[0])
    if extent_u >= extent_v:
        length, width = extent_u, extent_v
    else:
        length, width = extent_v, extent_u
        yaw += 0.5 * math.pi
    return float(center[0]), float(center[1]), float(length), float(width), wrap_half_turn(yaw)


def fit_box7(cluster_points) -> np.ndarray:
    """
    Fit a 7-DoF box to a point cluster.

    The footprint is the minimum-area rotated rectangle of the BEV convex
    hull; z-center and height come from the point height range.

    Parameters
    ----------
    cluster_points : array_like
        Points of shape (n, 3), at least three non-collinear in BEV

    Returns
    -------
    np.ndarray
        Box as a 7-vector with l >= w

    Raises
    ------
    DegenerateClusterError
        If the cluster is collinear in BEV
    """
    pts = np.asarray(cluster_points, dtype=float).reshape(-1, 3)
    cx, cy, length, width, yaw = min_area_rectangle(pts[:, :2])
    z_min, z_max = pts[:, 2].min(), pts[:, 2].max()
    height = max(z_max - z_min, MIN_HEIGHT)
    return np.array([cx, cy, 0.5 * (z_min + z_max), length, width, height, yaw])


def generate_seeds(scene: Scene, params: ClusterParams) -> np.ndarray:
    """
    Seed pseudo boxes of one scene.

    Parameters
    ----------
    scene : Scene
        Scene to label
    params : ClusterParams
        Clustering parameters

    Returns
    -------
    np.ndarray
        Boxes of shape (k, 7) sorted by BEV distance from the sensor
    """
    foreground = remove_ground(scene.points, params.ground_threshold)
    if len(foreground) == 0:
        return np.zeros((0, 7))
    points = scene.points[foreground]
    labels = dbscan(points, params.eps, params.min_pts)

    boxes: List[np.ndarray] = []
    for label in range(int(labels.max()) + 1):
        members = points[labels == label]
        if len(members) < params.min_cluster_size:
            continue
        try:
            boxes.append(fit_box7(members))
        except DegenerateClusterError:
            logger.debug("Scene %d: skipped degenerate cluster %d", scene.index, label)
    if not boxes:
        return np.zeros((0, 7))
    boxes_array = np.vstack(boxes)
    order = np.argsort(np.hypot(boxes_array[:, 0], boxes_array[:, 1]), kind="stable")
    return boxes_array[order]


def _seed_one(args) -> Scene:
    scene, params = args
    return scene.replace(pseudo_boxes=generate_seeds(scene, params), injected_errors=None)


def seed_scenes(scenes: List[Scene], params: ClusterParams, workers: int = 1) -> List[Scene]:
    """Replace the pseudo boxes of every scene by clustering seeds, in scene order."""
    jobs = [(scene, params) for scene in scenes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            seeded = list(pool.map(_seed_one, jobs))
    else:
        seeded = [_seed_one(job) for job in jobs]
    n_boxes = sum(len(s.pseudo_boxes) for s in seeded)
    logger.info("Generated %d seed boxes over %d scenes", n_boxes, len(seeded))
    return seeded
