"""
Detection metrics and uncertainty diagnostics.

Greedy score-ordered matching, all-point interpolated average precision,
AP_BEV / AP_3D per distance bucket, and the rank correlation between
estimated uncertainty and injected label error.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .data_format import BOX_COORDINATES, DISTANCE_BUCKETS, as_box_matrix
from .geometry import bev_iou, bev_iou_matrix, iou_3d, iou_3d_matrix, wrap_angle_residual

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.25

# Fewest paired samples for a reported correlation
MIN_CORRELATION_PAIRS = 10

# Written into metrics.json so numbers stay comparable across runs
METRICS_PROTOCOL = {
    "iou_threshold": DEFAULT_IOU_THRESHOLD,
    "interpolation": "all-point precision envelope",
    "matching": "greedy by descending score, highest-IoU unmatched gt, ties by lower index",
    "unmatched_detection_bucket": "own BEV center distance",
    "beyond_80m": "50-80m bucket",
}


@dataclass
class MatchResult:
    """
    Outcome of matching one scene's detections to its ground truth.

    Attributes
    ----------
    is_tp : np.ndarray
        True-positive flag per detection (input order)
    gt_index : np.ndarray
        Matched ground-truth index per detection, -1 if unmatched
    iou : np.ndarray
        IoU with the matched gt (best IoU for false positives)
    gt_matched : np.ndarray
        Matched flag per ground-truth box
    """
    is_tp: np.ndarray
    gt_index: np.ndarray
    iou: np.ndarray
    gt_matched: np.ndarray

    def __post_init__(self):
        matched = self.gt_index[self.gt_index >= 0]
        if len(np.unique(matched)) != len(matched):
            raise ValueError("A ground-truth box was matched more than once")


def _pairwise(iou_fn: Callable, dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    if iou_fn is bev_iou:
        return bev_iou_matrix(dets, gts)
    if iou_fn is iou_3d:
        return iou_3d_matrix(dets, gts)
    matrix = np.zeros((len(dets), len(gts)))
    for i, det in enumerate(dets):
        for j, gt in enumerate(gts):
            matrix[i, j] = iou_fn(det, gt)
    return matrix


def score_order(scores) -> np.ndarray:
    """Indices by descending score, lower index first on ties."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(len(scores)), -scores))


def match_detections(
    dets,
    scores,
    gts,
    iou_fn: Callable = bev_iou,
    threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """
    Greedily match detections to ground truth in descending score order.

    Each detection takes the unmatched gt with the highest IoU, provided the
    IoU reaches the threshold; ties go to the lower gt index.

    Parameters
    ----------
    dets : array_like
        Detections of shape (k, 7)
    scores : array_like
        Finite score per detection
    gts : array_like
        Ground truth of shape (m, 7)
    iou_fn : callable, optional
        Pairwise IoU function (default: bev_iou)
    threshold : float, optional
        Minimum IoU of a true positive (default: 0.25)

    Returns
    -------
    MatchResult
        Per-detection and per-gt outcome
    """
    dets, gts = as_box_matrix(dets), as_box_matrix(gts)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if len(scores) != len(dets):
        raise ValueError("One score per detection is required")
    if not np.all(np.isfinite(scores)):
        raise ValueError("Detection scores must be finite")
    ious = _pairwise(iou_fn, dets, gts)
    is_tp = np.zeros(len(dets), dtype=bool)
    gt_index = np.full(len(dets), -1, dtype=np.int64)
    best_iou = np.zeros(len(dets))
    gt_matched = np.zeros(len(gts), dtype=bool)
    for i in score_order(scores):
        if len(gts) == 0:
            break
        row = ious[i]
        best_iou[i] = row.max()
        available = np.where(gt_matched, -1.0, row)
        j = int(np.argmax(available))
        if available[j] >= threshold:
            is_tp[i], gt_index[i], best_iou[i] = True, j, row[j]
            gt_matched[j] = True
    return MatchResult(is_tp=is_tp, gt_index=gt_index, iou=best_iou, gt_matched=gt_matched)


def average_precision(scores, is_tp, n_gt: int) -> Optional[float]:
    """
    Area under the precision-recall curve with all-point interpolation.

    Parameters
    ----------
    scores : array_like
        Detection scores pooled over the evaluated set
    is_tp : array_like of bool
        True-positive flag per detection
    n_gt : int
        Ground-truth boxes in scope (recall denominator)

    Returns
    -------
    float or None
        AP in [0, 1]; None when there is no ground truth in scope
    """
    if n_gt <= 0:
        return None
    scores = np.asarray(scores, dtype=float).reshape(-1)
    is_tp = np.asarray(is_tp, dtype=bool).reshape(-1)
    if len(scores) == 0:
        return 0.0
    hits = is_tp[score_order(scores)]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def bucket_of(distance: float) -> str:
    """Distance bucket of a BEV distance; beyond 80 m counts as 50-80m."""
    for name, (low, high) in DISTANCE_BUCKETS.items():
        if name == "0-80m":
            continue
        if low <= distance < high:
            return name
    return "50-80m"


def _in_bucket(bucket: str, member: Sequence[str]) -> np.ndarray:
    member = np.asarray(member, dtype=object)
    if bucket == "0-80m":
        return np.ones(len(member), dtype=bool)
    return member == bucket


@dataclass
class MetricsTable:
    """
    AP and recall per distance bucket for both IoU kinds.

    Attributes
    ----------
    ap_bev, ap_3d, recall_bev, recall_3d : dict
        Bucket name to value in [0, 1], None for buckets without ground truth
    """
    ap_bev: Dict[str, Optional[float]] = field(default_factory=dict)
    ap_3d: Dict[str, Optional[float]] = field(default_factory=dict)
    recall_bev: Dict[str, Optional[float]] = field(default_factory=dict)
    recall_3d: Dict[str, Optional[float]] = field(default_factory=dict)

    def as_report_metrics(self) -> Dict[str, Dict[str, Optional[float]]]:
        """Per-bucket mapping used by RoundReport."""
        return {
            bucket: {
                "AP_BEV": self.ap_bev.get(bucket),
                "AP_3D": self.ap_3d.get(bucket),
                "recall_BEV": self.recall_bev.get(bucket),
                "recall_3D": self.recall_3d.get(bucket),
            }
            for bucket in DISTANCE_BUCKETS
        }

    @classmethod
    def from_report_metrics(cls, metrics: Dict[str, Dict[str, Optional[float]]]) -> "MetricsTable":
        return cls(
            ap_bev={b: v["AP_BEV"] for b, v in metrics.items()},
            ap_3d={b: v["AP_3D"] for b, v in metrics.items()},
            recall_bev={b: v["recall_BEV"] for b, v in metrics.items()},
            recall_3d={b: v["recall_3D"] for b, v in metrics.items()},
        )

    def table_cells(self) -> Dict[str, str]:
        """'AP_BEV / AP_3D' in percent per bucket, '-' where absent."""
        cells = {}
        for bucket in DISTANCE_BUCKETS:
            bev, threed = self.ap_bev.get(bucket), self.ap_3d.get(bucket)
            if bev is None or threed is None:
                cells[bucket] = "-"
            else:
                cells[bucket] = f"{100 * bev:.1f} / {100 * threed:.1f}"
        return cells


@dataclass
class SceneDetections:
    """Detections and ground truth of one evaluated scene."""
    boxes: np.ndarray
    scores: np.ndarray
    gts: np.ndarray


def bucketed_metrics(
    scenes: List[SceneDetections],
    threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MetricsTable:
    """
    AP_BEV and AP_3D per distance bucket over a set of scenes.

    Matching is done per scene over all boxes; a detection belongs to the
    bucket of its matched gt, or of its own center when unmatched. The 0-80m
    entries pool every detection and gt.

    Parameters
    ----------
    scenes : list of SceneDetections
        Per-scene detections, scores and ground truth
    threshold : float, optional
        IoU threshold (default: 0.25)

    Returns
    -------
    MetricsTable
        Values per bucket, None where a bucket has no ground truth
    """
    table = MetricsTable()
    for kind, iou_fn in (("bev", bev_iou), ("3d", iou_3d)):
        scores: List[float] = []
        hits: List[bool] = []
        det_buckets: List[str] = []
        gt_buckets: List[str] = []
        for scene in scenes:
            dets, gts = as_box_matrix(scene.boxes), as_box_matrix(scene.gts)
            result = match_detections(dets, scene.scores, gts, iou_fn, threshold)
            gt_b = [bucket_of(float(np.hypot(g[0], g[1]))) for g in gts]
            gt_buckets.extend(gt_b)
            for i, det in enumerate(dets):
                j = int(result.gt_index[i])
                det_buckets.append(gt_b[j] if j >= 0 else bucket_of(float(np.hypot(det[0], det[1]))))
            scores.extend(np.asarray(scene.scores, dtype=float).tolist())
            hits.extend(result.is_tp.tolist())
        scores_arr = np.asarray(scores, dtype=float)
        hits_arr = np.asarray(hits, dtype=bool)
        ap = table.ap_bev if kind == "bev" else table.ap_3d
        recall = table.recall_bev if kind == "bev" else table.recall_3d
        for bucket in DISTANCE_BUCKETS:
            det_mask = _in_bucket(bucket, det_buckets)
            n_gt = int(_in_bucket(bucket, gt_buckets).sum())
            ap[bucket] = average_precision(scores_arr[det_mask], hits_arr[det_mask], n_gt)
            recall[bucket] = float(hits_arr[det_mask].sum()) / n_gt if n_gt else None
    return table


def uncertainty_error_correlation(uncertainties, errors) -> Dict[str, Optional[Dict[str, float]]]:
    """
    Spearman rank correlation between uncertainty and absolute label error.

    Parameters
    ----------
    uncertainties : array_like
        Per-box uncertainty of shape (k, 7); NaN rows are dropped
    errors : array_like
        Injected errors of shape (k, 7)

    Returns
    -------
    dict
        Coordinate name to {'rho', 'n'}, or None with fewer than ten pairs
        or a constant column
    """
    u = np.asarray(uncertainties, dtype=float).reshape(-1, 7)
    e = np.abs(np.asarray(errors, dtype=float).reshape(-1, 7))
    if u.shape != e.shape:
        raise ValueError("Uncertainties and errors must pair up row by row")
    result: Dict[str, Optional[Dict[str, float]]] = {}
    for i, name in enumerate(BOX_COORDINATES):
        valid = np.isfinite(u[:, i]) & np.isfinite(e[:, i])
        x, y = u[valid, i], e[valid, i]
        if len(x) < MIN_CORRELATION_PAIRS or np.ptp(x) == 0 or np.ptp(y) == 0:
            result[name] = None
            continue
        rho = spearmanr(x, y).correlation
        result[name] = {"rho": float(rho), "n": int(len(x))} if np.isfinite(rho) else None
    return result


def pseudo_label_quality(
    pseudo_boxes: List[np.ndarray], gt_boxes: List[np.ndarray], threshold: float = DEFAULT_IOU_THRESHOLD
) -> Tuple[Optional[List[float]], Dict[str, Optional[float]]]:
    """
    Mean absolute coordinate error of matched pseudo boxes and summary counts.

    Pseudo boxes are matched to gt per scene by BEV IoU, in list order with
    unit scores. Theta errors are taken modulo pi.

    Returns
    -------
    tuple
        (mean error per coordinate or None if nothing matched,
        {'n_pseudo', 'n_gt', 'recall'})
    """
    errors: List[np.ndarray] = []
    n_pseudo = n_gt = n_hit = 0
    for pseudo, gts in zip(pseudo_boxes, gt_boxes):
        pseudo, gts = as_box_matrix(pseudo), as_box_matrix(gts)
        n_pseudo += len(pseudo)
        n_gt += len(gts)
        result = match_detections(pseudo, np.ones(len(pseudo)), gts, bev_iou, threshold)
        for i in np.flatnonzero(result.is_tp):
            gt = gts[result.gt_index[i]]
            err = np.abs(pseudo[i] - gt)
            err[6] = wrap_angle_residual(pseudo[i, 6], gt[6])
            errors.append(err)
        n_hit += int(result.gt_matched.sum())
    stats = {
        "n_pseudo": float(n_pseudo),
        "n_gt": float(n_gt),
        "recall": float(n_hit) / n_gt if n_gt else None,
    }
    if not errors:
        return None, stats
    return np.mean(errors, axis=0).tolist(), stats


def metrics_document(tables: Dict[int, MetricsTable]) -> dict:
    """metrics.json contents: protocol header and per-round table cells."""
    return {
        "protocol": METRICS_PROTOCOL,
        "rounds": {
            str(t): {"cells": table.table_cells(), "metrics": table.as_report_metrics()}
            for t, table in sorted(tables.items())
        },
    }
