"""
Input/output utilities for scenes, manifests, checkpoints and reports.

Scene files are JSON Lines (one scene per line). Manifests are YAML.
Checkpoints are HDF5 files holding one dataset per named parameter array
plus the config hash they were trained under.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import h5py
import jsonschema
import numpy as np
import yaml

from .data_format import FIELD_DESCRIPTIONS, RoundReport, Scene
from .exceptions import CheckpointError, DatasetError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

_VECTOR7 = {"type": "array", "items": {"type": "number"}, "minItems": 7, "maxItems": 7}

SCENE_RECORD_SCHEMA = {
    "type": "object",
    "required": ["index", "points", "gt", "pseudo", "prov"],
    "properties": {
        "index": {"type": "integer", "minimum": 0},
        "points": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        },
        "gt": {"type": "array", "items": _VECTOR7},
        "pseudo": {"type": "array", "items": _VECTOR7},
        "prov": {"type": "array", "items": {"type": "integer", "minimum": -1}},
        "err": {"type": "array", "items": _VECTOR7},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": [
        "spec",
        "spec_hash",
        "n_train",
        "n_test",
        "train_indices",
        "test_indices",
        "train_file",
        "test_file",
        "manifest_hash",
    ],
    "properties": {
        "spec": {"type": "object"},
        "spec_hash": {"type": "string"},
        "n_train": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "train_indices": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "test_indices": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "train_file": {"type": "string"},
        "test_file": {"type": "string"},
        "manifest_hash": {"type": "string"},
    },
}


def scene_to_record(scene: Scene) -> Dict[str, Any]:
    """Convert a scene to its JSON Lines record."""
    record: Dict[str, Any] = {
        "index": int(scene.index),
        "points": scene.points.tolist(),
        "gt": scene.gt_boxes.tolist(),
        "pseudo": scene.pseudo_boxes.tolist(),
        "prov": scene.prov.tolist(),
    }
    if scene.injected_errors is not None:
        record["err"] = scene.injected_errors.tolist()
    return record


def scene_from_record(record: Dict[str, Any]) -> Scene:
    """Build a scene from a JSON Lines record."""
    return Scene(
        points=np.asarray(record["points"], dtype=float).reshape(-1, 3),
        gt_boxes=np.asarray(record["gt"], dtype=float).reshape(-1, 7),
        pseudo_boxes=np.asarray(record["pseudo"], dtype=float).reshape(-1, 7),
        prov=np.asarray(record["prov"], dtype=np.int64),
        index=int(record["index"]),
        injected_errors=(
            np.asarray(record["err"], dtype=float).reshape(-1, 7) if "err" in record else None
        ),
    )


def save_scenes(scenes: Iterable[Scene], filepath: Union[str, Path]) -> None:
    """
    Save scenes to a JSON Lines file.

    Parameters
    ----------
    scenes : iterable of Scene
        Scenes to write, one per line in the given order
    filepath : str or Path
        Output path (must end with .jsonl)
    """
    filepath = Path(filepath)
    if filepath.suffix != ".jsonl":
        raise ValueError("Scene files require the .jsonl extension")
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        for scene in scenes:
            f.write(json.dumps(scene_to_record(scene), separators=(",", ":")))
            f.write("\n")


def load_scenes(filepath: Union[str, Path]) -> List[Scene]:
    """
    Load scenes from a JSON Lines file.

    Raises
    ------
    DatasetError
        If the file is missing or a line is not a valid scene record
    """
    filepath = Path(filepath)
    if not filepath.exists():
        raise DatasetError(f"File not found: {filepath}")
    scenes = []
    with open(filepath, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetError(f"{filepath}:{line_number}: invalid scene record ({e})") from e
    return scenes


def save_manifest(manifest: Dict[str, Any], filepath: Union[str, Path]) -> None:
    """Write a manifest mapping as YAML."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)


def load_manifest(filepath: Union[str, Path]) -> Dict[str, Any]:
    """
    Read and schema-check a dataset manifest.

    Raises
    ------
    DatasetError
        If the file is missing or does not match the manifest schema
    """
    filepath = Path(filepath)
    if filepath.is_dir():
        filepath = filepath / "manifest.yaml"
    if not filepath.exists():
        raise DatasetError(f"Manifest not found: {filepath}")
    with open(filepath, "r", encoding="utf-8") as f:
        manifest = yaml.safe_load(f)
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DatasetError(f"Invalid manifest {filepath}: {e.message}") from e
    return manifest


def _params_digest(params: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        array = np.ascontiguousarray(params[name], dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def save_checkpoint(
    params: Dict[str, np.ndarray],
    filepath: Union[str, Path],
    config_hash: str,
    attributes: Optional[Dict[str, Any]] = None,
) -> None:
    """
    Save named parameter arrays to an HDF5 checkpoint.

    Parameters
    ----------
    params : dict of str to np.ndarray
        Named parameter arrays
    filepath : str or Path
        Output path (must end with .hdf5)
    config_hash : str
        Hash of the model-shaping configuration
    attributes : dict, optional
        Extra scalar attributes (e.g., round index)
    """
    filepath = Path(filepath)
    if filepath.suffix != ".hdf5":
        raise ValueError("Checkpoints require the .hdf5 extension")
    filepath.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = filepath.with_suffix(".hdf5.tmp")
    with h5py.File(tmp_path, "w") as f:
        f.attrs["config_hash"] = config_hash
        f.attrs["format_version"] = CHECKPOINT_FORMAT_VERSION
        f.attrs["digest"] = _params_digest(params)
        for key, value in (attributes or {}).items():
            f.attrs[key] = value
        group = f.create_group("params")
        for name in sorted(params):
            dset = group.create_dataset(name, data=np.asarray(params[name], dtype=np.float64))
            dset.attrs["description"] = f"Parameter array {name}"
    tmp_path.replace(filepath)


def load_checkpoint(
    filepath: Union[str, Path], config_hash: Optional[str] = None
) -> Dict[str, np.ndarray]:
    """
    Load named parameter arrays from an HDF5 checkpoint.

    Parameters
    ----------
    filepath : str or Path
        Checkpoint path
    config_hash : str, optional
        Expected config hash; a mismatch is rejected

    Returns
    -------
    dict of str to np.ndarray
        Parameters, bit-identical to what was saved

    Raises
    ------
    CheckpointError
        If the file is missing, unreadable, truncated, fails its digest or
        was written under another config
    """
    filepath = Path(filepath)
    if not filepath.exists():
        raise CheckpointError(f"Checkpoint not found: {filepath}")
    try:
        with h5py.File(filepath, "r") as f:
            stored_hash = f.attrs["config_hash"]
            if isinstance(stored_hash, bytes):
                stored_hash = stored_hash.decode("utf-8")
            digest = f.attrs["digest"]
            if isinstance(digest, bytes):
                digest = digest.decode("utf-8")
            params = {name: np.array(f["params"][name]) for name in f["params"].keys()}
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"Could not read checkpoint {filepath}: {e}") from e

    if config_hash is not None and stored_hash != config_hash:
        raise CheckpointError(
            f"Checkpoint {filepath} was written for config {stored_hash[:12]}, "
            f"expected {config_hash[:12]}"
        )
    if _params_digest(params) != digest:
        raise CheckpointError(f"Checkpoint {filepath} failed its integrity digest")
    return params


def save_reports(
    reports: List[RoundReport], filepath: Union[str, Path], include_timing: bool = False
) -> None:
    """Write round reports as a JSON list (deterministic unless timing is included)."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    payload = [r.to_dict(include_timing=include_timing) for r in reports]
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_reports(filepath: Union[str, Path]) -> List[RoundReport]:
    """Read round reports written by ``save_reports``."""
    filepath = Path(filepath)
    if not filepath.exists():
        raise DatasetError(f"File not found: {filepath}")
    with open(filepath, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return [RoundReport.from_dict(entry) for entry in payload]


def save_json(payload: Any, filepath: Union[str, Path]) -> None:
    """Write a JSON document with sorted keys."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


class TrainingLog:
    """
    Append-only structured training log, one JSON object per step.

    Parameters
    ----------
    filepath : str or Path, optional
        Log file; ``None`` keeps records in memory only
    """

    def __init__(self, filepath: Optional[Union[str, Path]] = None):
        self.filepath = Path(filepath) if filepath is not None else None
        self.records: List[Dict[str, Any]] = []
        if self.filepath is not None:
            self.filepath.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.filepath is not None:
            with open(self.filepath, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True))
                f.write("\n")


def validate_scene_file(filepath: Union[str, Path]) -> Dict[str, Any]:
    """
    Validate that a JSON Lines file holds well-formed scene records.

    Parameters
    ----------
    filepath : str or Path
        Path to the scene file

    Returns
    -------
    Dict[str, Any]
        Validation results with 'valid' boolean and 'errors'/'warnings' lists
    """
    filepath = Path(filepath)
    results: Dict[str, Any] = {"valid": True, "errors": [], "warnings": []}

    if not filepath.exists():
        results["valid"] = False
        results["errors"].append(f"File not found: {filepath}")
        return results

    seen_indices = set()
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                record = json.loads(line)
                try:
                    jsonschema.validate(record, SCENE_RECORD_SCHEMA)
                except jsonschema.ValidationError as e:
                    results["valid"] = False
                    results["errors"].append(f"Line {line_number}: {e.message}")
                    continue
                if len(record["prov"]) != len(record["points"]):
                    results["valid"] = False
                    results["errors"].append(f"Line {line_number}: prov/points length mismatch")
                if record["index"] in seen_indices:
                    results["valid"] = False
                    results["errors"].append(f"Line {line_number}: duplicate index {record['index']}")
                seen_indices.add(record["index"])
                if not record["pseudo"]:
                    results["warnings"].append(f"Line {line_number}: no pseudo boxes")
                for key in record:
                    if key != "index" and key not in FIELD_DESCRIPTIONS:
                        results["warnings"].append(f"Line {line_number}: unknown field {key}")
    except (OSError, json.JSONDecodeError) as e:
        results["valid"] = False
        results["errors"].append(f"Error reading file: {str(e)}")

    if not seen_indices and results["valid"]:
        results["warnings"].append("File contains no scenes")
    return results


def validate_checkpoint_file(filepath: Union[str, Path]) -> Dict[str, Any]:
    """
    Validate that an HDF5 file is a readable, intact checkpoint.

    Returns
    -------
    Dict[str, Any]
        Validation results with 'valid' boolean and 'errors'/'warnings' lists
    """
    filepath = Path(filepath)
    results: Dict[str, Any] = {"valid": True, "errors": [], "warnings": []}
    try:
        params = load_checkpoint(filepath)
        if not params:
            results["warnings"].append("Checkpoint holds no parameters")
        for name, array in params.items():
            if not np.all(np.isfinite(array)):
                results["valid"] = False
                results["errors"].append(f"Non-finite values in {name}")
    except CheckpointError as e:
        results["valid"] = False
        results["errors"].append(str(e))
    return results


def print_dataset_info(root: Union[str, Path]) -> None:
    """
    Print information about a generated dataset directory.

    Parameters
    ----------
    root : str or Path
        Dataset directory holding manifest.yaml
    """
    try:
        root = Path(root)
        manifest = load_manifest(root / "manifest.yaml")
        train = load_scenes(root / manifest["train_file"])
        print(f"Dataset: {root}")
        print(f"Spec hash: {manifest['spec_hash'][:16]}")
        print(f"Manifest hash: {manifest['manifest_hash'][:16]}")
        print(f"Train scenes: {manifest['n_train']}  Test scenes: {manifest['n_test']}")
        n_gt = sum(s.n_objects for s in train)
        n_pseudo = sum(len(s.pseudo_boxes) for s in train)
        n_points = sum(s.n_points for s in train)
        print(f"Train objects: {n_gt}  pseudo boxes: {n_pseudo}  points: {n_points}")
        if manifest.get("corruption"):
            c = manifest["corruption"]
            print(f"Corruption: fraction={c['fraction']}, stds={c['stds']}")
        if manifest.get("cluster_params"):
            print(f"Cluster params: {manifest['cluster_params']}")
    except Exception as e:
        print(f"Error reading dataset: {e}")
