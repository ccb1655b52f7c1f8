"""
Deterministic synthetic LiDAR-like scenes.

Scenes hold car-like boxes standing on a ground plane around a sensor at
the origin. Object points are sampled on the sensor-facing side faces with
a density that decays with distance, so far objects are sparse and hard to
fit. Every output is a pure function of the spec seed and scene index.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .data_format import CorruptionSpec, Scene, SceneSpec, canonical_hash, wrap_angle
from .exceptions import DatasetError, SceneOverconstrainedError
from .geometry import points_in_boxes, wrap_angle_residual

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000

# Clearance between circumscribed circles of neighbouring objects (m)
PLACEMENT_MARGIN = 0.3

# Augmentation ranges: yaw in radians, isotropic scale ratio
ROTATION_RANGE = (-0.785, 0.785)
SCALE_RANGE = (0.95, 1.05)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n_objects = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    boxes: List[np.ndarray] = []
    for _ in range(n_objects):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            radius = rng.uniform(*spec.radius_range)
            azimuth = rng.uniform(-math.pi, math.pi)
            l = rng.uniform(*spec.length_range)
            w = rng.uniform(*spec.width_range)
            h = rng.uniform(*spec.height_range)
            yaw = rng.uniform(-math.pi, math.pi)
            candidate = np.array(
                [radius * math.cos(azimuth), radius * math.sin(azimuth), 0.5 * h, l, w, h, yaw]
            )
            if math.hypot(candidate[0], candidate[1]) > spec.radius_range[1]:
                continue
            if _is_clear(candidate, boxes):
                boxes.append(candidate)
                break
        else:
            raise SceneOverconstrainedError()
    if not boxes:
        return np.zeros((0, 7))
    return np.vstack(boxes)


def _is_clear(candidate: np.ndarray, boxes: List[np.ndarray]) -> bool:
    reach = 0.5 * math.hypot(candidate[3], candidate[4])
    for other in boxes:
        gap = math.hypot(candidate[0] - other[0], candidate[1] - other[1])
        if gap < reach + 0.5 * math.hypot(other[3], other[4]) + PLACEMENT_MARGIN:
            return False
    return True


def _object_point_count(spec: SceneSpec, box: np.ndarray) -> int:
    distance = max(math.hypot(box[0], box[1]), 1e-6)
    expected = spec.base_density * (10.0 / distance) ** spec.density_decay
    return max(3, int(round(expected)))


def _sample_surface(
    box: np.ndarray, count: int, jitter: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample points on the sensor-facing side faces of one box."""
    x, y, z, l, w, h, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    # Side faces as (outward normal in the local frame, half extent along, face area)
    faces = [
        (np.array([1.0, 0.0]), 0.5 * l, w * h),
        (np.array([-1.0, 0.0]), 0.5 * l, w * h),
        (np.array([0.0, 1.0]), 0.5 * w, l * h),
        (np.array([0.0, -1.0]), 0.5 * w, l * h),
    ]
    to_sensor = -np.array([c * x + s * y, -s * x + c * y])
    to_sensor /= max(np.linalg.norm(to_sensor), 1e-12)
    weights = np.array([max(float(normal @ to_sensor), 0.0) * area for normal, _, area in faces])
    if weights.sum() <= 0.0:
        weights = np.ones(len(faces))
    weights /= weights.sum()

    face_ids = rng.choice(len(faces), size=count, p=weights)
    local = np.empty((count, 3))
    for k, face in enumerate(face_ids):
        normal, offset, _ = faces[face]
        if normal[0] != 0.0:
            local[k, 0] = normal[0] * offset
            local[k, 1] = rng.uniform(-0.5 * w, 0.5 * w)
        else:
            local[k, 0] = rng.uniform(-0.5 * l, 0.5 * l)
            local[k, 1] = normal[1] * offset
        local[k, 2] = rng.uniform(-0.5 * h, 0.5 * h)
    local += rng.normal(0.0, jitter, size=local.shape)
    half = 0.5 * np.array([l, w, h])
    local = np.clip(local, -half, half)

    world = np.empty_like(local)
    world[:, 0] = x + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = y + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = z + local[:, 2]
    return world


def _sample_ground(spec: SceneSpec, boxes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = spec.ground_points
    radius = rng.uniform(1.0, spec.radius_range[1], size=n)
    azimuth = rng.uniform(-math.pi, math.pi, size=n)
    ground = np.column_stack(
        [radius * np.cos(azimuth), radius * np.sin(azimuth), rng.normal(0.0, spec.ground_z_std, n)]
    )
    if len(boxes) and n:
        inside = points_in_boxes(ground, boxes).any(axis=1)
        ground = ground[~inside]
    return ground


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    """
    Generate one scene as a deterministic function of (spec.seed, index).

    Parameters
    ----------
    spec : SceneSpec
        Generator parameters
    index : int
        Nonnegative scene index

    Returns
    -------
    Scene
        Points with provenance tags and ground-truth boxes; no pseudo boxes

    Raises
    ------
    SceneOverconstrainedError
        If an object cannot be placed within 1000 attempts
    """
    if index < 0:
        raise ValueError("Scene index must be nonnegative")
    rng = _scene_rng(spec.seed, index)
    boxes = _place_objects(spec, rng)

    chunks, provenance = [], []
    for i, box in enumerate(boxes):
        count = _object_point_count(spec, box)
        chunks.append(_sample_surface(box, count, spec.surface_jitter, rng))
        provenance.append(np.full(count, i, dtype=np.int64))
    ground = _sample_ground(spec, boxes, rng)
    chunks.append(ground)
    provenance.append(np.full(len(ground), -1, dtype=np.int64))

    return Scene(
        points=np.vstack(chunks) if chunks else np.zeros((0, 3)),
        gt_boxes=boxes,
        pseudo_boxes=np.zeros((0, 7)),
        prov=np.concatenate(provenance),
        index=index,
    )


def corrupt_labels(scene: Scene, corruption: CorruptionSpec) -> Scene:
    """
    Derive pseudo boxes from gt boxes with controlled per-coordinate noise.

    A fixed share of the boxes (``round(fraction * m)``) is perturbed by
    independent Gaussian noise per coordinate; yaw noise is added with
    wrapping and sizes are kept above 0.1 m. The absolute per-coordinate
    error of every pseudo box is stored in ``injected_errors``.

    Parameters
    ----------
    scene : Scene
        Scene with ground-truth boxes
    corruption : CorruptionSpec
        Noise fraction, stds and seed

    Returns
    -------
    Scene
        Copy of the scene with ``pseudo_boxes`` and ``injected_errors`` set
    """
    rng = np.random.default_rng([int(corruption.seed), int(scene.index), 7])
    gt = scene.gt_boxes
    m = len(gt)
    n_corrupt = int(round(corruption.fraction * m))
    chosen = np.zeros(m, dtype=bool)
    chosen[rng.permutation(m)[:n_corrupt]] = True
    noise = rng.normal(0.0, 1.0, size=(m, 7)) * np.asarray(corruption.stds)
    noise[~chosen] = 0.0

    pseudo = gt + noise
    pseudo[:, 3:6] = np.where(noise[:, 3:6] != 0.0, np.maximum(pseudo[:, 3:6], 0.1), gt[:, 3:6])
    turned = noise[:, 6] != 0.0
    pseudo[turned, 6] = wrap_angle(pseudo[turned, 6])
    errors = np.abs(pseudo - gt)
    errors[:, 6] = wrap_angle_residual(pseudo[:, 6], gt[:, 6])
    return scene.replace(pseudo_boxes=pseudo, injected_errors=errors)


@dataclass
class AugmentationDraw:
    """
    One sampled world augmentation.

    Attributes
    ----------
    flip : bool
        Mirror across the x-axis (y -> -y, theta -> -theta)
    rotation : float
        Yaw rotation about the sensor in radians
    scale : float
        Isotropic scale ratio
    """
    flip: bool = False
    rotation: float = 0.0
    scale: float = 1.0


def _transform_points(points: np.ndarray, draw: AugmentationDraw) -> np.ndarray:
    out = points.copy()
    if draw.flip:
        out[:, 1] = -out[:, 1]
    c, s = math.cos(draw.rotation), math.sin(draw.rotation)
    x, y = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return out * draw.scale


def _transform_boxes(boxes: np.ndarray, draw: AugmentationDraw) -> np.ndarray:
    if len(boxes) == 0:
        return boxes.copy()
    out = boxes.copy()
    out[:, :3] = _transform_points(boxes[:, :3], draw)
    out[:, 3:6] = boxes[:, 3:6] * draw.scale
    theta = -boxes[:, 6] if draw.flip else boxes[:, 6]
    out[:, 6] = wrap_angle(theta + draw.rotation)
    return out


def apply_augmentation(scene: Scene, draw: AugmentationDraw) -> Scene:
    """Apply one augmentation draw to points, gt boxes and pseudo boxes."""
    if not draw.flip and draw.rotation == 0.0 and draw.scale == 1.0:
        return scene.replace()
    return scene.replace(
        points=_transform_points(scene.points, draw),
        gt_boxes=_transform_boxes(scene.gt_boxes, draw),
        pseudo_boxes=_transform_boxes(scene.pseudo_boxes, draw),
    )


def augment_scene(
    scene: Scene,
    rng: np.random.Generator,
    flip: bool = True,
    rotation_range: Tuple[float, float] = ROTATION_RANGE,
    scale_range: Tuple[float, float] = SCALE_RANGE,
) -> Scene:
    """
    Apply a random world flip, rotation and scaling.

    Parameters
    ----------
    scene : Scene
        Scene to augment
    rng : np.random.Generator
        Source of the draw
    flip : bool, optional
        Whether x-axis flipping is enabled (default: True)
    rotation_range : tuple of float, optional
        Yaw range in radians (default: [-0.785, 0.785])
    scale_range : tuple of float, optional
        Scale ratio range (default: [0.95, 1.05])

    Returns
    -------
    Scene
        The augmented scene
    """
    draw = AugmentationDraw(
        flip=bool(flip and rng.random() < 0.5),
        rotation=float(rng.uniform(*rotation_range)),
        scale=float(rng.uniform(*scale_range)),
    )
    return apply_augmentation(scene, draw)


def subsample_points(
    scene: Scene, n: int, rng: np.random.Generator, shuffle: bool = True
) -> Scene:
    """
    Resample a scene to exactly n points.

    Without replacement when the scene has at least n points; otherwise
    every point is kept once and the remainder is drawn with replacement.
    Provenance tags travel with their points. With ``shuffle=False`` the
    kept points stay in file order.

    Raises
    ------
    DatasetError
        If the scene has no points
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    total = scene.n_points
    if total == 0:
        raise DatasetError("cannot subsample an empty scene")
    if total >= n:
        choice = rng.choice(total, size=n, replace=False)
    else:
        extra = rng.choice(total, size=n - total, replace=True)
        choice = np.concatenate([rng.permutation(total), extra])
    if not shuffle:
        choice = np.sort(choice, kind="stable")
    return scene.replace(points=scene.points[choice], prov=scene.prov[choice])


@dataclass
class DatasetHandle:
    """
    Location and manifest of a generated train/test split.

    Attributes
    ----------
    root : Path
        Dataset directory
    manifest : dict
        Parsed manifest contents
    """
    root: Path
    manifest: dict

    @property
    def train_path(self) -> Path:
        return self.root / self.manifest["train_file"]

    @property
    def test_path(self) -> Path:
        return self.root / self.manifest["test_file"]

    @property
    def manifest_hash(self) -> str:
        return self.manifest["manifest_hash"]


def open_dataset(root: Union[str, Path]) -> DatasetHandle:
    """Open a split written by ``make_split``; raises DatasetError when invalid."""
    from .io import load_manifest

    root = Path(root)
    return DatasetHandle(root=root, manifest=load_manifest(root))


def _generate_one(args) -> Scene:
    spec, index, corruption = args
    scene = generate_scene(spec, index)
    if corruption is not None:
        scene = corrupt_labels(scene, corruption)
    return scene


def generate_scenes(
    spec: SceneSpec,
    indices: List[int],
    corruption: Optional[CorruptionSpec] = None,
    workers: int = 1,
) -> List[Scene]:
    """Generate scenes for the given indices, merged in index order."""
    jobs = [(spec, i, corruption) for i in indices]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_one, jobs))
    return [_generate_one(job) for job in jobs]


def make_split(
    spec: SceneSpec,
    n_train: int,
    n_test: int,
    destination: Union[str, Path],
    corruption: Optional[CorruptionSpec] = None,
    workers: int = 1,
) -> DatasetHandle:
    """
    Generate and write a train/test split with disjoint index ranges.

    Train scenes take indices [0, n_train) and test scenes
    [n_train, n_train + n_test). When a corruption spec is given, the
    training scenes carry corrupted pseudo boxes and their injected errors.

    Parameters
    ----------
    spec : SceneSpec
        Generator parameters
    n_train, n_test : int
        Scene counts, both at least 1
    destination : str or Path
        Output directory
    corruption : CorruptionSpec, optional
        Label noise for the training scenes
    workers : int, optional
        Worker processes for generation (default: 1)

    Returns
    -------
    DatasetHandle
        Handle with the written manifest
    """
    from .io import save_manifest, save_scenes

    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    root = Path(destination)
    train_indices = list(range(n_train))
    test_indices = list(range(n_train, n_train + n_test))
    logger.info("Generating %d train and %d test scenes", n_train, n_test)
    train = generate_scenes(spec, train_indices, corruption, workers)
    test = generate_scenes(spec, test_indices, None, workers)

    save_scenes(train, root / "train.jsonl")
    save_scenes(test, root / "test.jsonl")

    manifest: Dict[str, object] = {
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "n_train": n_train,
        "n_test": n_test,
        "train_indices": [train_indices[0], train_indices[-1] + 1],
        "test_indices": [test_indices[0], test_indices[-1] + 1],
        "corruption": corruption.to_dict() if corruption is not None else None,
        "train_file": "train.jsonl",
        "test_file": "test.jsonl",
        "seeds": {"scene": spec.seed, "corruption": corruption.seed if corruption else None},
    }
    manifest["manifest_hash"] = canonical_hash(manifest)
    save_manifest(manifest, root / "manifest.yaml")
    return DatasetHandle(root=root, manifest=manifest)
