#!/usr/bin/env python3
"""
Script to create the controlled-corruption corpus.

Pseudo boxes of the training scenes are ground truth with Gaussian noise
added to 30% of the boxes, and every scene records its injected errors.
Training on this corpus with ``seed_source=file`` measures how well the
learned uncertainty ranks the true label errors.
"""

import sys
from pathlib import Path

from pseudobox_lab import CorruptionSpec, SceneSpec, make_split
from pseudobox_lab.io import print_dataset_info, validate_scene_file


def create_corpus(output_dir, n_train=64, n_test=32, seed=0):
    """
    Generate and write the corrupted train/test split.

    Parameters
    ----------
    output_dir : Path
        Dataset directory
    n_train, n_test : int
        Scene counts
    seed : int
        Seed of both the scenes and the corruption

    Returns
    -------
    DatasetHandle
        Handle of the written split
    """
    spec = SceneSpec(seed=seed)
    corruption = CorruptionSpec(
        fraction=0.3, stds=(0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0.3), seed=seed
    )
    return make_split(spec, n_train, n_test, output_dir, corruption)


def main():
    output_dir = Path(__file__).parent.parent / "data" / "corrupted"
    print("Creating corrupted corpus")
    print("=" * 50)
    handle = create_corpus(output_dir)

    print("\nValidating training scenes...")
    results = validate_scene_file(handle.train_path)
    if not results["valid"]:
        print("Validation errors:")
        for error in results["errors"]:
            print(f"  - {error}")
        sys.exit(1)
    print_dataset_info(handle.root)


if __name__ == "__main__":
    main()
