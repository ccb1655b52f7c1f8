"""
Seed training, self-training rounds and ablations.

A round trains a freshly initialized two-branch network on the current
pseudo boxes; the trained primary branch then relabels the training set for
the next round. Every round leaves a checkpoint, its relabeled boxes and a
report in the run directory, so an interrupted run resumes from the last
completed round and reproduces the uninterrupted result.
"""

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import TrainConfig, save_config
from .data_format import DISTANCE_BUCKETS, RoundReport, Scene, SceneSpec, as_box_matrix
from .evaluation import (
    MetricsTable,
    SceneDetections,
    bucketed_metrics,
    metrics_document,
    pseudo_label_quality,
    score_order,
    uncertainty_error_correlation,
)
from .exceptions import NumericalOverflowError
from .geometry import bev_iou
from .io import (
    TrainingLog,
    load_checkpoint,
    load_scenes,
    save_checkpoint,
    save_json,
    save_manifest,
    save_reports,
    save_scenes,
)
from .nnet import (
    AdamState,
    ModelParams,
    NetworkShape,
    adam_step,
    backward,
    forward_dense,
    finite_diff_check,
    init_params,
    scene_features,
)
from .pseudolabel import seed_scenes
from .scenegen import augment_scene, generate_scene, open_dataset, subsample_points
from .uncertainty import (
    RULE_KINDS,
    UNCERTAINTY_MODES,
    assign_targets,
    box_uncertainties,
    compute_losses,
    estimate_uncertainty,
    rule_uncertainty_field,
)

logger = logging.getLogger(__name__)


def _rng(cfg: TrainConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg.seed), *(int(k) for k in keys)])


def network_shape(cfg: TrainConfig) -> NetworkShape:
    return NetworkShape(
        input_width=cfg.input_width,
        trunk_widths=cfg.trunk_widths,
        head_width=cfg.head_width,
        gamma=cfg.gamma,
        split_depth=cfg.split_depth,
    )


def init_model(cfg: TrainConfig, round_index: int = 0) -> ModelParams:
    """Fresh parameters for a round, seeded by (seed, round)."""
    return init_params(
        cfg.trunk_widths,
        cfg.gamma,
        seed=[int(cfg.seed), int(round_index), 0],
        input_width=cfg.input_width,
        head_width=cfg.head_width,
        split_depth=cfg.split_depth,
    )


def prepare_training_scene(scene: Scene, cfg: TrainConfig, rng: np.random.Generator) -> Scene:
    """Augment and subsample a training scene."""
    if cfg.augment:
        scene = augment_scene(scene, rng, cfg.flip, cfg.rotation_range, cfg.scale_range)
    return subsample_points(scene, cfg.points_per_scene, rng, shuffle=cfg.shuffle_train_points)


def scene_step(params: ModelParams, scene: Scene, cfg: TrainConfig):
    """
    Loss breakdown and parameter gradients for one prepared scene.

    Returns
    -------
    tuple
        (LossBreakdown, gradient dict)
    """
    settings = cfg.loss_settings()
    features = scene_features(scene, cfg)
    pred_p, pred_a, tape = forward_dense(params, scene.points, features, cfg.size_prior)
    assignment = assign_targets(scene)
    rules = None
    if settings.uncertainty_mode in RULE_KINDS:
        rules = rule_uncertainty_field(scene, assignment, settings.uncertainty_mode)
    breakdown, loss_grad = compute_losses(pred_p, pred_a, assignment, settings, rules)
    return breakdown, backward(tape, loss_grad, params)


def _empty_metrics() -> Dict[str, Dict[str, Optional[float]]]:
    return MetricsTable().as_report_metrics()


def train_round(
    cfg: TrainConfig,
    scenes: List[Scene],
    init: Optional[ModelParams] = None,
    round_index: int = 0,
    log: Optional[TrainingLog] = None,
    eval_scenes: Optional[List[Scene]] = None,
    progress: bool = False,
) -> Tuple[ModelParams, RoundReport]:
    """
    Train one round on scenes carrying pseudo boxes.

    Each step augments and subsamples ``batch_size`` scenes, runs both
    branches, assigns targets, computes the uncertainty-regularized loss,
    backpropagates and applies one Adam update with the averaged gradient.
    The scene order and every random draw derive from (seed, round, epoch,
    scene position).

    Parameters
    ----------
    cfg : TrainConfig
        Training configuration
    scenes : list of Scene
        Training scenes; their pseudo boxes are the targets
    init : ModelParams, optional
        Starting parameters; a fresh init for the round when omitted
    round_index : int, optional
        Round number (default: 0)
    log : TrainingLog, optional
        Receives one record per optimizer step
    eval_scenes : list of Scene, optional
        Scenes scored at the end of the round
    progress : bool, optional
        Show a progress bar over epochs

    Returns
    -------
    tuple
        (trained params, RoundReport)

    Raises
    ------
    NumericalOverflowError
        If a forward pass, loss or update becomes non-finite; carries the step
    """
    started = time.perf_counter()
    params = init.copy() if init is not None else init_model(cfg, round_index)
    state = AdamState()
    step = 0
    epoch_totals: List[float] = []
    epoch_uncertainty: List[np.ndarray] = []

    for epoch in tqdm(range(cfg.epochs), desc=f"round {round_index}", disable=not progress, leave=False):
        lr = cfg.learning_rate(epoch)
        order = _rng(cfg, round_index, epoch).permutation(len(scenes))
        epoch_totals, epoch_uncertainty = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            accumulated: Dict[str, np.ndarray] = {}
            records = []
            try:
                for position in batch:
                    rng = _rng(cfg, round_index, epoch, 1 + int(position))
                    prepared = prepare_training_scene(scenes[position], cfg, rng)
                    breakdown, grads = scene_step(params, prepared, cfg)
                    records.append(breakdown)
                    for name, grad in grads.items():
                        accumulated[name] = accumulated.get(name, 0.0) + grad
                mean_grads = {k: v / len(batch) for k, v in accumulated.items()}
                params, state, norm = adam_step(
                    params,
                    mean_grads,
                    state,
                    lr,
                    cfg.weight_decay,
                    cfg.adam_betas,
                    cfg.adam_eps,
                    cfg.grad_clip,
                )
            except NumericalOverflowError as e:
                raise NumericalOverflowError(step=step) from e

            totals = [r.total for r in records]
            epoch_totals.extend(totals)
            epoch_uncertainty.extend(r.mean_uncertainty for r in records if r.n_foreground)
            if log is not None:
                entry: Dict[str, Any] = {
                    "round": round_index,
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "grad_norm": norm,
                }
                rows = [r.to_dict() for r in records]
                for key in rows[0]:
                    entry[key] = float(np.mean([row[key] for row in rows]))
                log.write(entry)
            step += 1
    logger.info("Round %d: %d optimizer steps", round_index, step)

    report = RoundReport(
        round_index=round_index,
        metrics=_empty_metrics(),
        pseudo_label_error=None,
        pseudo_label_stats={},
        mean_uncertainty=(
            np.mean(epoch_uncertainty, axis=0).tolist() if epoch_uncertainty else [0.0] * 7
        ),
        final_loss=float(np.mean(epoch_totals)) if epoch_totals else 0.0,
    )
    report.pseudo_label_error, report.pseudo_label_stats = pseudo_label_quality(
        [s.pseudo_boxes for s in scenes], [s.gt_boxes for s in scenes]
    )
    if any(s.injected_errors is not None for s in scenes):
        report.uncertainty_error_rho = uncertainty_error_correlation(
            *pseudo_box_uncertainties(params, scenes, cfg)
        )
    if eval_scenes is not None:
        report.metrics = evaluate(params, eval_scenes, cfg).as_report_metrics()
    report.wall_time = time.perf_counter() - started
    return params, report


def pseudo_box_uncertainties(
    params: ModelParams, scenes: List[Scene], cfg: TrainConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Learned uncertainty per pseudo box next to its injected error.

    Only scenes carrying injected errors contribute. The per-box value is
    the branch disagreement averaged over the points inside the box.

    Returns
    -------
    tuple
        (uncertainties, errors), both of shape (k, 7)
    """
    uncertainties, errors = [], []
    for scene in scenes:
        if scene.injected_errors is None or scene.n_points == 0 or len(scene.pseudo_boxes) == 0:
            continue
        features = scene_features(scene, cfg)
        pred_p, pred_a, _ = forward_dense(params, scene.points, features, cfg.size_prior)
        field = estimate_uncertainty(pred_p, pred_a)
        assignment = assign_targets(scene)
        uncertainties.append(box_uncertainties(field, assignment, len(scene.pseudo_boxes)))
        errors.append(scene.injected_errors)
    if not uncertainties:
        return np.zeros((0, 7)), np.zeros((0, 7))
    return np.vstack(uncertainties), np.vstack(errors)


def nms_indices(boxes, scores, iou_threshold: float = 0.1) -> np.ndarray:
    """
    Greedy BEV non-maximum suppression.

    Returns
    -------
    np.ndarray
        Indices of the kept boxes in descending score order, lower index
        first on ties
    """
    boxes = as_box_matrix(boxes)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have equal length")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    suppressed = np.zeros(len(boxes), dtype=bool)
    kept = []
    for i in score_order(scores):
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed[i] = True
        gap = np.hypot(boxes[:, 0] - boxes[i, 0], boxes[:, 1] - boxes[i, 1])
        for j in np.flatnonzero(~suppressed & (gap < radius + radius[i])):
            if bev_iou(boxes[i], boxes[j]) > iou_threshold:
                suppressed[j] = True
    return np.asarray(kept, dtype=np.int64)


def nms_aggregate(boxes, scores, iou_threshold: float = 0.1) -> np.ndarray:
    """Boxes surviving greedy BEV non-maximum suppression, shape (k, 7)."""
    boxes = as_box_matrix(boxes)
    return boxes[nms_indices(boxes, scores, iou_threshold)]


def detect(
    params: ModelParams, scene: Scene, cfg: TrainConfig, threshold: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Primary-branch detections of a scene.

    Per-point boxes with objectness at or above the threshold are merged by
    non-maximum suppression. The auxiliary branch is never evaluated.

    The scene is fed whole, not subsampled to ``points_per_scene`` as in
    training. The pooled context and the neighbourhood features are means,
    so a denser cloud of the same surfaces gives the same inputs up to
    sampling noise, and every object point keeps its own box.

    Returns
    -------
    tuple
        (boxes of shape (k, 7), objectness scores)
    """
    if scene.n_points == 0:
        return np.zeros((0, 7)), np.zeros(0)
    features = scene_features(scene, cfg)
    pred, _, _ = forward_dense(
        params, scene.points, features, cfg.size_prior, branches=("primary",)
    )
    keep = np.flatnonzero(pred.objectness >= threshold)
    boxes, scores = pred.boxes[keep], pred.objectness[keep]
    kept = nms_indices(boxes, scores, cfg.nms_iou)
    return boxes[kept], scores[kept]


def infer_pseudo_boxes(
    params: ModelParams, scene: Scene, threshold: float, cfg: TrainConfig
) -> np.ndarray:
    """Relabeled pseudo boxes of a scene, shape (k, 7)."""
    return detect(params, scene, cfg, threshold)[0]


def _detect_job(args):
    params, scene, cfg, threshold = args
    boxes, scores = detect(params, scene, cfg, threshold)
    return SceneDetections(boxes=boxes, scores=scores, gts=scene.gt_boxes)


def _detect_all(
    params: ModelParams, scenes: List[Scene], cfg: TrainConfig, threshold: float
) -> List[SceneDetections]:
    jobs = [(params, scene, cfg, threshold) for scene in scenes]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_detect_job, jobs))
    return [_detect_job(job) for job in jobs]


def evaluate(params: ModelParams, scenes: List[Scene], cfg: TrainConfig) -> MetricsTable:
    """AP_BEV / AP_3D per distance bucket of the primary branch on a scene set."""
    detections = _detect_all(params, scenes, cfg, cfg.eval_score_threshold)
    return bucketed_metrics(detections, cfg.eval_iou)


def relabel_scenes(params: ModelParams, scenes: List[Scene], cfg: TrainConfig) -> List[Scene]:
    """Replace every scene's pseudo boxes by the model's detections."""
    detections = _detect_all(params, scenes, cfg, cfg.relabel_threshold)
    relabeled = [
        scene.replace(pseudo_boxes=d.boxes, injected_errors=None)
        for scene, d in zip(scenes, detections)
    ]
    n_boxes = sum(len(s.pseudo_boxes) for s in relabeled)
    logger.info("Relabeled %d scenes with %d pseudo boxes", len(relabeled), n_boxes)
    return relabeled


def load_model(filepath: Union[str, Path], cfg: TrainConfig) -> ModelParams:
    """Load a checkpoint written under ``cfg``'s network shape."""
    arrays = load_checkpoint(filepath, cfg.config_hash())
    return ModelParams(arrays, network_shape(cfg))


def _round_complete(round_dir: Path) -> bool:
    return (round_dir / "checkpoint.hdf5").exists() and (round_dir / "report.json").exists()


def self_train(
    cfg: TrainConfig,
    dataset: Optional[Union[str, Path]] = None,
    output_dir: Optional[Union[str, Path]] = None,
    resume: bool = True,
    progress: bool = False,
) -> List[RoundReport]:
    """
    Seed training followed by ``cfg.rounds`` self-training rounds.

    Round 0 trains on clustering seeds (or the scene file's pseudo boxes
    when ``seed_source`` is 'file'); round t >= 1 trains on the boxes that
    the round t-1 model inferred on the training set.

    Parameters
    ----------
    cfg : TrainConfig
        Run configuration
    dataset : str or Path, optional
        Dataset directory (default: ``cfg.dataset``)
    output_dir : str or Path, optional
        Run directory (default: ``cfg.output_dir``)
    resume : bool, optional
        Reuse completed rounds found in the run directory (default: True)
    progress : bool, optional
        Show progress bars

    Returns
    -------
    list of RoundReport
        One report per round, ``cfg.rounds + 1`` in total

    Files written to the run directory
    ----------------------------------
    config.yaml, run.yaml, labels_round_{t}.jsonl, round_{t}/checkpoint.hdf5,
    round_{t}/report.json, round_{t}/train_log.jsonl, reports.json,
    timings.json, metrics.json
    """
    handle = open_dataset(dataset if dataset is not None else cfg.dataset)
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_scenes(handle.train_path)
    test = load_scenes(handle.test_path)
    save_config(cfg, out / "config.yaml")
    save_manifest(
        {
            "config_hash": cfg.config_hash(),
            "dataset": str(handle.root),
            "manifest_hash": handle.manifest_hash,
            "relabel_threshold": cfg.relabel_threshold,
            "seed_source": cfg.seed_source,
            "cluster": cfg.cluster_params().to_dict(),
            "rounds": cfg.rounds,
        },
        out / "run.yaml",
    )

    labels_path = out / "labels_round_0.jsonl"
    if resume and labels_path.exists():
        labels = load_scenes(labels_path)
    else:
        if cfg.seed_source == "cluster":
            labels = seed_scenes(train, cfg.cluster_params(), cfg.workers)
        else:
            labels = train
        save_scenes(labels, labels_path)

    reports: List[RoundReport] = []
    params: Optional[ModelParams] = None
    for t in tqdm(range(cfg.rounds + 1), desc="self-training", disable=not progress):
        round_dir = out / f"round_{t}"
        if resume and _round_complete(round_dir):
            logger.info("Round %d: reusing completed round", t)
            params = load_model(round_dir / "checkpoint.hdf5", cfg)
            with open(round_dir / "report.json", "r", encoding="utf-8") as f:
                report = RoundReport.from_dict(json.load(f))
        else:
            log_path = round_dir / "train_log.jsonl"
            if log_path.exists():
                log_path.unlink()
            init = params if cfg.warm_start and params is not None else None
            params, report = train_round(
                cfg, labels, init, t, TrainingLog(log_path), eval_scenes=test, progress=progress
            )
            save_checkpoint(params.arrays, round_dir / "checkpoint.hdf5", cfg.config_hash(), {"round": t})
            save_json(report.to_dict(include_timing=True), round_dir / "report.json")
        reports.append(report)
        logger.info(
            "Round %d: AP_BEV(0-80m) %s", t, report.metrics["0-80m"]["AP_BEV"]
        )

        if t < cfg.rounds:
            next_path = out / f"labels_round_{t + 1}.jsonl"
            if resume and next_path.exists():
                labels = load_scenes(next_path)
            else:
                labels = relabel_scenes(params, train, cfg)
                save_scenes(labels, next_path)

    save_reports(reports, out / "reports.json")
    save_json({str(r.round_index): r.wall_time for r in reports}, out / "timings.json")
    save_json(
        metrics_document({r.round_index: MetricsTable.from_report_metrics(r.metrics) for r in reports}),
        out / "metrics.json",
    )
    return reports


def _arm_name(values: Dict[str, Any]) -> str:
    return ",".join(f"{k}={values[k]}" for k in sorted(values))


def _run_arm(args) -> Dict[str, Any]:
    cfg, dataset, out, values = args
    reports = self_train(cfg, dataset, out)
    final = reports[-1]
    return {
        "arm": _arm_name(values),
        "overrides": values,
        "AP_BEV": final.metrics["0-80m"]["AP_BEV"],
        "AP_3D": final.metrics["0-80m"]["AP_3D"],
        "mean_uncertainty": final.mean_uncertainty,
        "uncertainty_error_rho": reports[0].uncertainty_error_rho,
    }


def ablation_arms(grid: Dict[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of a grid as override mappings, keys in sorted order."""
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_ablation(
    base: TrainConfig,
    grid: Dict[str, Sequence[Any]],
    dataset: Optional[Union[str, Path]] = None,
    output_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    """
    Run one self-training job per grid arm and summarize the final rounds.

    Arms run as independent processes; results keep the arm order. The
    summary is written to ``ablation.json`` in the output directory.

    Parameters
    ----------
    base : TrainConfig
        Configuration shared by all arms
    grid : dict
        Config key to the list of values to sweep
    dataset, output_dir : str or Path, optional
        Dataset and parent output directory
    workers : int, optional
        Concurrent arms (default: 1)

    Returns
    -------
    list of dict
        Per-arm 0-80m AP_BEV / AP_3D, mean uncertainty and correlation
    """
    out = Path(output_dir if output_dir is not None else base.output_dir)
    dataset = dataset if dataset is not None else base.dataset
    jobs = []
    for values in ablation_arms(grid):
        arm_dir = out / _arm_name(values).replace("=", "_").replace(",", "__")
        cfg = base.replace(**values, output_dir=str(arm_dir), workers=1)
        jobs.append((cfg, dataset, arm_dir, values))
    logger.info("Running %d ablation arms with %d workers", len(jobs), workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_arm, jobs))
    else:
        results = [_run_arm(job) for job in jobs]
    save_json({"buckets": list(DISTANCE_BUCKETS), "arms": results}, out / "ablation.json")
    return results


def detection_uncertainties(
    params: ModelParams, scene: Scene, boxes, cfg: TrainConfig
) -> np.ndarray:
    """
    Learned uncertainty of given boxes: branch disagreement averaged over the
    points inside each box; NaN rows for boxes holding no points.
    """
    boxes = as_box_matrix(boxes)
    if scene.n_points == 0 or len(boxes) == 0:
        return np.full((len(boxes), 7), np.nan)
    features = scene_features(scene, cfg)
    pred_p, pred_a, _ = forward_dense(params, scene.points, features, cfg.size_prior)
    assignment = assign_targets(scene.replace(pseudo_boxes=boxes))
    return box_uncertainties(estimate_uncertainty(pred_p, pred_a), assignment, len(boxes))


# Sweep of the gradient check: every loss path and width ratio is covered
GRADIENT_CHECK_GRID = {
    "gamma": (0.25, 0.5, 1.0, 2.0),
    "uncertainty_mode": UNCERTAINTY_MODES,
    "granularity": ("coordinate", "box", "cloud"),
    "lam": (0.0, 1e-5, 1e-4),
    "stop_grad_uncertainty": (False, True),
    "loss_kind": ("l1", "smooth_l1"),
    "split_depth": (0, 1, 2),
}


def check_gradients(
    n_configs: int = 32, seed: int = 0, points: int = 48, fraction: float = 0.05
) -> List[Dict[str, Any]]:
    """
    Finite-difference check of the full training loss over random configs.

    Gamma and the uncertainty mode cycle with coprime periods, so twenty
    configs cover every pairing; the rest of the grid is drawn at random.
    Each config uses a small network and a scene subsampled to ``points``
    points with its ground truth as pseudo boxes.

    Returns
    -------
    list of dict
        Per config: the sampled settings, the maximum relative error and the
        number of sampled and skipped parameters
    """
    rng = np.random.default_rng([int(seed), 11])
    spec = SceneSpec(seed=seed, object_count=(2, 3), radius_range=(6.0, 14.0), ground_points=60)
    results = []
    for i in range(n_configs):
        values = {key: grid[rng.integers(len(grid))] for key, grid in GRADIENT_CHECK_GRID.items()}
        values["gamma"] = GRADIENT_CHECK_GRID["gamma"][i % len(GRADIENT_CHECK_GRID["gamma"])]
        values["uncertainty_mode"] = UNCERTAINTY_MODES[i % len(UNCERTAINTY_MODES)]
        cfg = TrainConfig(trunk_widths=(16, 24), head_width=24, seed=seed + i, **values)
        scene = generate_scene(spec, i)
        scene = scene.replace(pseudo_boxes=scene.gt_boxes)
        scene = subsample_points(scene, points, _rng(cfg, 97, i), shuffle=False)
        params = init_model(cfg, i)
        error, sampled, skipped = finite_diff_check(
            params, scene, cfg, fraction=fraction, seed=seed + i, return_counts=True
        )
        results.append({"config": values, "max_relative_error": error, "sampled": sampled, "skipped": skipped})
        logger.info(
            "Gradient check %d/%d %s: %.3e (%d of %d skipped)", i + 1, n_configs, values, error, skipped, sampled
        )
    return results
