#!/usr/bin/env python3
"""
Validation script for pseudobox-lab datasets and run outputs.

This script validates scene files (JSON Lines), dataset manifests and model
checkpoints (HDF5) and reports any issues or warnings.
"""

import sys
import argparse
from pathlib import Path

from pseudobox_lab.exceptions import DatasetError
from pseudobox_lab.io import (
    load_manifest,
    print_dataset_info,
    validate_checkpoint_file,
    validate_scene_file,
)


def detect_file_type(filepath):
    """
    Detect what kind of artifact a file is from its name.

    Parameters
    ----------
    filepath : Path
        Path to the file

    Returns
    -------
    str
        'scenes', 'manifest', 'checkpoint' or 'unknown'
    """
    if filepath.suffix == ".jsonl" and filepath.name != "train_log.jsonl":
        return "scenes"
    if filepath.name == "manifest.yaml":
        return "manifest"
    if filepath.suffix == ".hdf5":
        return "checkpoint"
    return "unknown"


def validate_manifest(filepath):
    """Validate a manifest and the scene files it points to."""
    results = {"valid": True, "errors": [], "warnings": []}
    try:
        manifest = load_manifest(filepath)
    except DatasetError as e:
        return {"valid": False, "errors": [str(e)], "warnings": []}
    for key in ("train_file", "test_file"):
        scene_file = filepath.parent / manifest[key]
        if not scene_file.exists():
            results["valid"] = False
            results["errors"].append(f"{key} missing: {scene_file}")
    return results


def validate_file(filepath):
    """
    Validate a single scene file, manifest or checkpoint.

    Parameters
    ----------
    filepath : Path
        Path to the file to validate

    Returns
    -------
    dict
        Validation results
    """
    file_type = detect_file_type(filepath)
    print(f"Validating {filepath}...")
    if file_type == "scenes":
        results = validate_scene_file(filepath)
    elif file_type == "manifest":
        results = validate_manifest(filepath)
    elif file_type == "checkpoint":
        results = validate_checkpoint_file(filepath)
    else:
        print("  Warning: Could not detect file type")
        return {"valid": False, "errors": ["unknown file type"], "warnings": []}

    print(f"\nValidation Results for {filepath.name} ({file_type})")
    print("=" * 50)
    if results["valid"]:
        print("VALID: passes all validation checks")
    else:
        print("INVALID: has validation errors")

    if results["errors"]:
        print("\nErrors:")
        for error in results["errors"]:
            print(f"  - {error}")
    if results["warnings"]:
        print("\nWarnings:")
        for warning in results["warnings"]:
            print(f"  - {warning}")

    if results["valid"] and file_type == "manifest":
        print("\nDataset Information:")
        print("-" * 30)
        print_dataset_info(filepath.parent)
    return results


def validate_directory(directory, pattern):
    """
    Validate every matching file below a directory.

    Returns
    -------
    dict
        Summary of validation results
    """
    files = [p for p in sorted(directory.rglob(pattern)) if detect_file_type(p) != "unknown"]
    if not files:
        print(f"No files matching {pattern} found in {directory}")
        return {"total": 0, "valid": 0, "invalid": 0}

    print(f"Found {len(files)} files to validate")
    print("=" * 60)
    invalid = 0
    for filepath in files:
        if not validate_file(filepath)["valid"]:
            invalid += 1
        print("\n" + "-" * 60)

    print("\nValidation Summary")
    print("=" * 40)
    print(f"Total files: {len(files)}")
    print(f"Valid files: {len(files) - invalid}")
    print(f"Invalid files: {invalid}")
    return {"total": len(files), "valid": len(files) - invalid, "invalid": invalid}


def main():
    """Main validation function."""
    parser = argparse.ArgumentParser(
        description="Validate pseudobox-lab scene files, manifests and checkpoints",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Validate a generated dataset
  python validate.py data/synthetic/manifest.yaml

  # Validate one checkpoint
  python validate.py runs/default/round_0/checkpoint.hdf5

  # Validate everything in a run directory
  python validate.py runs/default
        """,
    )
    parser.add_argument("path", type=Path, help="File or directory to validate")
    parser.add_argument(
        "--pattern", default="*", help="File pattern to match when validating directories"
    )
    args = parser.parse_args()

    if not args.path.exists():
        print(f"Error: Path '{args.path}' does not exist")
        sys.exit(1)
    try:
        if args.path.is_file():
            sys.exit(0 if validate_file(args.path)["valid"] else 1)
        summary = validate_directory(args.path, args.pattern)
        sys.exit(0 if summary["invalid"] == 0 else 1)
    except KeyboardInterrupt:
        print("\nValidation interrupted by user")
        sys.exit(1)


if __name__ == "__main__":
    main()
