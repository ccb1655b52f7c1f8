"""
Pseudobox Lab Package

A desk-scale lab for training dense 3D box regressors on noisy pseudo boxes,
with learned per-coordinate uncertainty and iterative self-training.
"""

__version__ = "0.1.0"

from .data_format import (
    Box7,
    BevPolygon,
    SceneSpec,
    CorruptionSpec,
    Scene,
    DensePrediction,
    UncertaintyField,
    TargetAssignment,
    LossBreakdown,
    RoundReport,
    DISTANCE_BUCKETS,
)
from .exceptions import (
    PseudoboxLabError,
    SceneOverconstrainedError,
    DegenerateClusterError,
    NumericalOverflowError,
    TapeMismatchError,
    CheckpointError,
    ConfigError,
    DatasetError,
)
from .geometry import bev_iou, iou_3d, box_corners_bev, points_in_box
from .scenegen import generate_scene, corrupt_labels, augment_scene, subsample_points, make_split
from .pseudolabel import ClusterParams, generate_seeds, fit_box7, min_area_rectangle
from .nnet import init_params, forward_dense, backward, adam_step, finite_diff_check
from .uncertainty import (
    LossSettings,
    estimate_uncertainty,
    regularized_loss,
    total_loss,
    rule_uncertainty,
    compute_losses,
)
from .config import TrainConfig, load_config, save_config
from .evaluation import average_precision, bucketed_metrics, uncertainty_error_correlation
from .io import load_scenes, save_scenes, load_checkpoint, save_checkpoint
from .pipeline import train_round, self_train, detect, infer_pseudo_boxes, evaluate, run_ablation
from .viz import RenderSpec, render_scene, render_uncertainty_glyphs

__all__ = [
    "Box7",
    "BevPolygon",
    "SceneSpec",
    "CorruptionSpec",
    "Scene",
    "DensePrediction",
    "UncertaintyField",
    "TargetAssignment",
    "LossBreakdown",
    "RoundReport",
    "DISTANCE_BUCKETS",
    "PseudoboxLabError",
    "SceneOverconstrainedError",
    "DegenerateClusterError",
    "NumericalOverflowError",
    "TapeMismatchError",
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "bev_iou",
    "iou_3d",
    "box_corners_bev",
    "points_in_box",
    "generate_scene",
    "corrupt_labels",
    "augment_scene",
    "subsample_points",
    "make_split",
    "ClusterParams",
    "generate_seeds",
    "fit_box7",
    "min_area_rectangle",
    "init_params",
    "forward_dense",
    "backward",
    "adam_step",
    "finite_diff_check",
    "LossSettings",
    "estimate_uncertainty",
    "regularized_loss",
    "total_loss",
    "rule_uncertainty",
    "compute_losses",
    "TrainConfig",
    "load_config",
    "save_config",
    "average_precision",
    "bucketed_metrics",
    "uncertainty_error_correlation",
    "load_scenes",
    "save_scenes",
    "load_checkpoint",
    "save_checkpoint",
    "train_round",
    "self_train",
    "detect",
    "infer_pseudo_boxes",
    "evaluate",
    "run_ablation",
    "RenderSpec",
    "render_scene",
    "render_uncertainty_glyphs",
]
