"""Shared fixtures: small scenes, tiny configs and a generated split."""

import numpy as np
import pytest

from pseudobox_lab.config import TrainConfig
from pseudobox_lab.data_format import SceneSpec
from pseudobox_lab.scenegen import generate_scene, make_split


SMALL_SPEC = SceneSpec(
    seed=0,
    object_count=(2, 3),
    radius_range=(6.0, 40.0),
    base_density=120.0,
    ground_points=150,
)


def tiny_config(tmp_path=None, **changes) -> TrainConfig:
    """Config small enough for a training round to take well under a second."""
    values = dict(
        trunk_widths=(8, 12),
        head_width=12,
        epochs=2,
        batch_size=2,
        points_per_scene=64,
        rounds=0,
        augment=False,
    )
    if tmp_path is not None:
        values["dataset"] = str(tmp_path / "data")
        values["output_dir"] = str(tmp_path / "run")
    values.update(changes)
    return TrainConfig(**values)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


@pytest.fixture
def small_scene():
    return generate_scene(SMALL_SPEC, 0)


@pytest.fixture
def labeled_scenes():
    """Training scenes whose pseudo boxes are their ground truth."""
    scenes = [generate_scene(SMALL_SPEC, i) for i in range(4)]
    return [s.replace(pseudo_boxes=s.gt_boxes) for s in scenes]


@pytest.fixture
def small_dataset(tmp_path):
    """A written split of four training and two test scenes."""
    return make_split(SMALL_SPEC, 4, 2, tmp_path / "data")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
