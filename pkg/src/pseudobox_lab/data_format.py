"""
Data format definitions for pseudo-box learning experiments.

This module defines the records shared across the package: 7-DoF boxes,
synthetic scenes and the specs that generate or corrupt them, dense
per-point predictions, uncertainty fields, target assignments, loss
breakdowns and per-round reports. Records validate themselves on
construction and keep array fields as numpy arrays.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# Coordinate order of every 7-vector in the package
BOX_COORDINATES = ("x", "y", "z", "l", "w", "h", "theta")

# Standard descriptions for record fields written to files
FIELD_DESCRIPTIONS = {
    "points": "LiDAR-like points (x, y, z)",
    "gt": "Ground-truth boxes (x, y, z, l, w, h, theta)",
    "pseudo": "Pseudo boxes used as training targets",
    "prov": "Per-point provenance: object index or -1 for background",
    "err": "Injected per-coordinate error magnitudes of the pseudo boxes",
}

# Units of the seven box coordinates
BOX_UNITS = {
    "x": "m",
    "y": "m",
    "z": "m",
    "l": "m",
    "w": "m",
    "h": "m",
    "theta": "rad",
}

# Distance buckets of the evaluation protocol (BEV distance of the box center)
DISTANCE_BUCKETS = {
    "0-30m": (0.0, 30.0),
    "30-50m": (30.0, 50.0),
    "50-80m": (50.0, 80.0),
    "0-80m": (0.0, 80.0),
}


def wrap_angle(theta):
    """
    Wrap angles to [-pi, pi).

    Parameters
    ----------
    theta : float or array_like
        Angles in radians

    Returns
    -------
    float or np.ndarray
        Wrapped angles
    """
    wrapped = np.mod(np.asarray(theta, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def canonical_hash(payload: dict) -> str:
    """SHA-256 of the canonical JSON encoding of a mapping."""
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


@dataclass
class Box7:
    """
    A 7-DoF 3D bounding box with yaw-only orientation.

    Attributes
    ----------
    x, y, z : float
        Box center in meters
    l, w, h : float
        Length, width and height in meters (all positive)
    theta : float
        Yaw in radians, stored wrapped to [-pi, pi)
    """
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        """Validate fields and wrap the yaw."""
        values = [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
        if not all(math.isfinite(float(v)) for v in values):
            raise ValueError("All box fields must be finite")
        for name in ("l", "w", "h"):
            if float(getattr(self, name)) <= 0.0:
                raise ValueError(f"Box size '{name}' must be positive")
        self.x, self.y, self.z = float(self.x), float(self.y), float(self.z)
        self.l, self.w, self.h = float(self.l), float(self.w), float(self.h)
        self.theta = wrap_angle(float(self.theta))

    def as_array(self) -> np.ndarray:
        """Box as a float64 7-vector in coordinate order."""
        return np.array(
            [self.x, self.y, self.z, self.l, self.w, self.h, self.theta], dtype=float
        )

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box7":
        """Build a box from a 7-vector."""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape != (7,):
            raise ValueError(f"Box needs 7 coordinates, got {values.shape[0]}")
        return cls(*values.tolist())

    @property
    def volume(self) -> float:
        """Box volume in cubic meters."""
        return self.l * self.w * self.h

    @property
    def bev_distance(self) -> float:
        """Distance of the box center from the sensor in the ground plane."""
        return math.hypot(self.x, self.y)


@dataclass
class BevPolygon:
    """
    Counterclockwise convex footprint of a box.

    Attributes
    ----------
    vertices : np.ndarray
        Array of shape (4, 2) with vertex coordinates in meters
    """
    vertices: np.ndarray

    def __post_init__(self):
        """Validate shape, area and orientation."""
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.shape != (4, 2):
            raise ValueError("BEV polygon must have 4 vertices")
        if self.signed_area <= 0.0:
            raise ValueError("BEV polygon must be counterclockwise with nonzero area")

    @property
    def signed_area(self) -> float:
        """Shoelace area, positive for counterclockwise order."""
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def as_box_array(box) -> np.ndarray:
    """Return a float64 7-vector for a Box7 or any 7-element sequence."""
    if isinstance(box, Box7):
        return box.as_array()
    values = np.asarray(box, dtype=float).reshape(-1)
    if values.shape != (7,):
        raise ValueError(f"Box needs 7 coordinates, got {values.shape[0]}")
    return values


def as_box_matrix(boxes) -> np.ndarray:
    """Return an (m, 7) float64 array for a list of boxes or an array."""
    if isinstance(boxes, np.ndarray) and boxes.ndim == 2:
        if boxes.shape[1] != 7:
            raise ValueError("Box arrays must have 7 columns")
        return boxes.astype(float, copy=False)
    rows = [as_box_array(b) for b in boxes]
    if not rows:
        return np.zeros((0, 7))
    return np.vstack(rows)


@dataclass
class SceneSpec:
    """
    Parameters of the synthetic scene generator.

    Attributes
    ----------
    seed : int
        Root seed; every scene is a function of (seed, index)
    object_count : tuple of int
        Inclusive (min, max) number of objects per scene
    length_range, width_range, height_range : tuple of float
        Uniform size ranges in meters (car-like defaults)
    radius_range : tuple of float
        Placement annulus (min, max) in meters; max may not exceed 80 m
    base_density : float
        Points per object at 10 m from the sensor
    density_decay : float
        Exponent of the (10 / distance) density falloff
    ground_points : int
        Number of background ground points
    ground_z_std : float
        Standard deviation of ground point height in meters
    surface_jitter : float
        Standard deviation of object surface point jitter in meters
    """
    seed: int = 0
    object_count: Tuple[int, int] = (4, 8)
    length_range: Tuple[float, float] = (3.5, 5.5)
    width_range: Tuple[float, float] = (1.6, 2.2)
    height_range: Tuple[float, float] = (1.4, 1.9)
    radius_range: Tuple[float, float] = (5.0, 80.0)
    base_density: float = 200.0
    density_decay: float = 2.0
    ground_points: int = 600
    ground_z_std: float = 0.02
    surface_jitter: float = 0.03

    def __post_init__(self):
        """Validate ranges."""
        self.object_count = tuple(int(v) for v in self.object_count)
        for name in ("length_range", "width_range", "height_range", "radius_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        ranges = {
            "object_count": self.object_count,
            "length_range": self.length_range,
            "width_range": self.width_range,
            "height_range": self.height_range,
            "radius_range": self.radius_range,
        }
        for name, (low, high) in ranges.items():
            if low > high:
                raise ValueError(f"{name} must be a nonempty range")
            if low < 0 or (name != "object_count" and low <= 0):
                raise ValueError(f"{name} must be positive")
        if self.radius_range[1] > 80.0:
            raise ValueError("radius_range maximum may not exceed 80 m")
        if self.base_density <= 0 or self.density_decay < 0:
            raise ValueError("base_density must be positive and density_decay >= 0")
        if self.ground_points < 0 or self.ground_z_std < 0 or self.surface_jitter < 0:
            raise ValueError("ground_points and noise levels must be nonnegative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "SceneSpec":
        return cls(**values)

    def spec_hash(self) -> str:
        """Stable hash of the spec, recorded in dataset manifests."""
        return canonical_hash(self.to_dict())


@dataclass
class CorruptionSpec:
    """
    Controlled label noise applied to ground-truth boxes.

    Attributes
    ----------
    fraction : float
        Fraction of boxes perturbed, in [0, 1]
    stds : tuple of float
        Per-coordinate Gaussian noise std (meters for x..h, radians for theta)
    seed : int
        Seed of the corruption draw
    """
    fraction: float = 0.3
    stds: Tuple[float, ...] = (0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0.3)
    seed: int = 0

    def __post_init__(self):
        """Validate fraction and noise levels."""
        self.stds = tuple(float(s) for s in self.stds)
        if len(self.stds) != 7:
            raise ValueError("stds must have 7 entries")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must be in [0, 1]")
        if any(s < 0 for s in self.stds):
            raise ValueError("stds must be nonnegative")

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "stds": list(self.stds), "seed": self.seed}


@dataclass
class Scene:
    """
    One synthetic point cloud with its boxes.

    Attributes
    ----------
    points : np.ndarray
        Points of shape (n, 3) in meters
    gt_boxes : np.ndarray
        Ground-truth boxes of shape (m, 7)
    pseudo_boxes : np.ndarray
        Pseudo boxes of shape (k, 7), empty until seeded or corrupted
    prov : np.ndarray
        Integer provenance per point: object index or -1 for background
    index : int
        Scene index within its generating spec
    injected_errors : np.ndarray, optional
        Per-pseudo-box absolute coordinate errors of shape (k, 7), set by
        label corruption
    """
    points: np.ndarray
    gt_boxes: np.ndarray
    pseudo_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    prov: Optional[np.ndarray] = None
    index: int = 0
    injected_errors: Optional[np.ndarray] = None

    def __post_init__(self):
        """Validate and convert arrays after initialization."""
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.gt_boxes = as_box_matrix(self.gt_boxes)
        self.pseudo_boxes = as_box_matrix(self.pseudo_boxes)
        if self.prov is None:
            self.prov = np.full(len(self.points), -1, dtype=np.int64)
        self.prov = np.asarray(self.prov, dtype=np.int64).reshape(-1)
        if len(self.prov) != len(self.points):
            raise ValueError("prov must have one entry per point")
        if self.injected_errors is not None:
            self.injected_errors = np.asarray(self.injected_errors, dtype=float)
            self.injected_errors = self.injected_errors.reshape(-1, 7)
            if len(self.injected_errors) != len(self.pseudo_boxes):
                raise ValueError("injected_errors must have one row per pseudo box")

    @property
    def n_points(self) -> int:
        """Number of points in the scene."""
        return len(self.points)

    @property
    def n_objects(self) -> int:
        """Number of ground-truth boxes."""
        return len(self.gt_boxes)

    def replace(self, **changes) -> "Scene":
        """Copy of the scene with some fields replaced."""
        values = {
            "points": self.points,
            "gt_boxes": self.gt_boxes,
            "pseudo_boxes": self.pseudo_boxes,
            "prov": self.prov,
            "index": self.index,
            "injected_errors": self.injected_errors,
        }
        values.update(changes)
        return Scene(**values)


@dataclass
class DensePrediction:
    """
    One box per input point from a single detector branch.

    Attributes
    ----------
    boxes : np.ndarray
        Decoded boxes of shape (n, 7) in world units, theta wrapped
    objectness : np.ndarray
        Per-point objectness in (0, 1)
    logits : np.ndarray
        Raw objectness logits
    branch : str
        'primary' or 'auxiliary'
    """
    boxes: np.ndarray
    objectness: np.ndarray
    logits: np.ndarray
    branch: str

    def __post_init__(self):
        """Validate row counts and branch tag."""
        if self.branch not in ("primary", "auxiliary"):
            raise ValueError(f"branch must be 'primary' or 'auxiliary', got '{self.branch}'")
        self.boxes = np.asarray(self.boxes, dtype=float)
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 7:
            raise ValueError("Dense boxes must have shape (n, 7)")
        if len(self.objectness) != len(self.boxes) or len(self.logits) != len(self.boxes):
            raise ValueError("Objectness must have one entry per predicted box")

    @property
    def n_rows(self) -> int:
        """Number of predicted boxes (equals the point count)."""
        return len(self.boxes)


@dataclass
class UncertaintyField:
    """
    Per-point, per-coordinate nonnegative uncertainty.

    Attributes
    ----------
    values : np.ndarray
        Array of shape (n, 7); meters for x..h, radians for theta
    """
    values: np.ndarray

    def __post_init__(self):
        """Validate shape, sign and finiteness."""
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != 7:
            raise ValueError("Uncertainty field must have shape (n, 7)")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("Uncertainty values must be finite and nonnegative")

    @property
    def n_rows(self) -> int:
        return len(self.values)


@dataclass
class TargetAssignment:
    """
    Dense regression targets taken from pseudo boxes.

    Attributes
    ----------
    targets : np.ndarray
        Array of shape (n, 7); rows of background points are NaN
    mask : np.ndarray
        Boolean foreground mask of length n
    box_index : np.ndarray
        Index of the assigned pseudo box, -1 for background
    """
    targets: np.ndarray
    mask: np.ndarray
    box_index: np.ndarray

    def __post_init__(self):
        """Check that a point has a target exactly when it is foreground."""
        self.targets = np.asarray(self.targets, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.box_index = np.asarray(self.box_index, dtype=np.int64)
        has_target = np.all(np.isfinite(self.targets), axis=1)
        if not np.array_equal(has_target, self.mask):
            raise ValueError("A point must have a target iff it is foreground")
        if not np.array_equal(self.box_index >= 0, self.mask):
            raise ValueError("box_index must be set exactly for foreground points")

    @property
    def n_foreground(self) -> int:
        return int(self.mask.sum())


@dataclass
class LossBreakdown:
    """
    Loss terms of one optimizer step.

    Attributes
    ----------
    coord_primary, coord_auxiliary : np.ndarray
        Plain per-coordinate losses L_p,i and L_a,i (mean over foreground)
    regularized_primary, regularized_auxiliary : float
        Uncertainty-regularized losses of the two branches
    objectness_primary, objectness_auxiliary : float
        Binary cross-entropy of the objectness logits
    total : float
        Total training loss
    mean_uncertainty : np.ndarray
        Mean per-coordinate uncertainty over foreground points
    n_foreground : int
        Number of points that carried a regression target
    """
    coord_primary: np.ndarray
    coord_auxiliary: np.ndarray
    regularized_primary: float
    regularized_auxiliary: float
    objectness_primary: float
    objectness_auxiliary: float
    total: float
    mean_uncertainty: np.ndarray
    n_foreground: int = 0

    def __post_init__(self):
        values = [
            self.regularized_primary,
            self.regularized_auxiliary,
            self.objectness_primary,
            self.objectness_auxiliary,
            self.total,
        ]
        arrays = [self.coord_primary, self.coord_auxiliary, self.mean_uncertainty]
        if not all(math.isfinite(v) for v in values) or not all(
            np.all(np.isfinite(a)) for a in arrays
        ):
            raise ValueError("Loss terms must be finite")

    def to_dict(self) -> Dict[str, object]:
        """Flat mapping for the structured training log."""
        record: Dict[str, object] = {}
        for i, name in enumerate(BOX_COORDINATES):
            record[f"L_p_{name}"] = float(self.coord_primary[i])
            record[f"L_a_{name}"] = float(self.coord_auxiliary[i])
            record[f"U_{name}"] = float(self.mean_uncertainty[i])
        record.update(
            {
                "L_p_u": float(self.regularized_primary),
                "L_a_u": float(self.regularized_auxiliary),
                "obj_p": float(self.objectness_primary),
                "obj_a": float(self.objectness_auxiliary),
                "L_total": float(self.total),
                "n_foreground": int(self.n_foreground),
            }
        )
        return record


@dataclass
class RoundReport:
    """
    Metrics of one training round.

    Attributes
    ----------
    round_index : int
        Round T; 0 is seed training
    metrics : dict
        Per-bucket {'AP_BEV', 'AP_3D', 'recall_BEV', 'recall_3D'}, None where absent
    pseudo_label_error : list of float, optional
        Mean absolute coordinate error of the round's training pseudo boxes vs gt
    pseudo_label_stats : dict
        Number of pseudo boxes and their recall against gt
    mean_uncertainty : list of float
        Mean learned uncertainty per coordinate at the end of training
    uncertainty_error_rho : dict, optional
        Spearman rho per coordinate when the corpus carries injected errors
    final_loss : float
        Mean total loss of the last epoch
    wall_time : float
        Seconds spent on the round; excluded from the deterministic dict
    """
    round_index: int
    metrics: Dict[str, Dict[str, Optional[float]]]
    pseudo_label_error: Optional[List[float]]
    pseudo_label_stats: Dict[str, Optional[float]]
    mean_uncertainty: List[float]
    uncertainty_error_rho: Optional[Dict[str, Optional[float]]] = None
    final_loss: float = 0.0
    wall_time: float = 0.0

    def __post_init__(self):
        if self.round_index < 0:
            raise ValueError("round_index must be nonnegative")
        if set(self.metrics) != set(DISTANCE_BUCKETS):
            raise ValueError(f"metrics must cover exactly the buckets {list(DISTANCE_BUCKETS)}")

    def to_dict(self, include_timing: bool = False) -> dict:
        record = asdict(self)
        if not include_timing:
            record.pop("wall_time")
        return record

    @classmethod
    def from_dict(cls, values: dict) -> "RoundReport":
        return cls(**values)
