"""
Pseudo-label uncertainty and the uncertainty-regularized training loss.

Uncertainty is the per-coordinate disagreement between the primary and the
auxiliary branch. Regression losses are reweighted by exp(-U) and U is
penalized by lambda * U, at coordinate, box or cloud granularity. Rule-based
uncertainties (distance, point count, volume) are provided for comparison.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .data_format import (
    DensePrediction,
    Scene,
    TargetAssignment,
    UncertaintyField,
    LossBreakdown,
    as_box_array,
    as_box_matrix,
)
from .exceptions import NumericalOverflowError
from .geometry import points_in_box, points_in_boxes, wrap_half_turn

logger = logging.getLogger(__name__)

GRANULARITIES = ("coordinate", "box", "cloud")
RULE_KINDS = ("distance", "numpts", "volume")
UNCERTAINTY_MODES = ("learned", "none") + RULE_KINDS

# Normalizers of the rule-based uncertainties
TAU_DISTANCE = 100.0
TAU_NUMPTS = 100.0
TAU_VOLUME = 10.0


@dataclass
class LossSettings:
    """
    Loss hyperparameters.

    Attributes
    ----------
    lam : float
        Weight of the uncertainty penalty
    mu : float
        Weight of the auxiliary branch loss
    granularity : str
        'coordinate', 'box' or 'cloud'
    uncertainty_mode : str
        'learned', 'none' or one of the rule kinds
    stop_grad_uncertainty : bool
        Treat the learned uncertainty as a constant in backpropagation
    loss_kind : str
        'l1' or 'smooth_l1'
    smooth_l1_beta : float
        Transition point of the smooth L1 loss
    """
    lam: float = 1e-5
    mu: float = 1.0
    granularity: str = "coordinate"
    uncertainty_mode: str = "learned"
    stop_grad_uncertainty: bool = False
    loss_kind: str = "l1"
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be nonnegative")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise ValueError(f"uncertainty_mode must be one of {UNCERTAINTY_MODES}")
        if self.loss_kind not in ("l1", "smooth_l1"):
            raise ValueError("loss_kind must be 'l1' or 'smooth_l1'")
        if not self.smooth_l1_beta > 0:
            raise ValueError("smooth_l1_beta must be positive")


def assign_targets(scene: Scene) -> TargetAssignment:
    """
    Dense regression targets from the scene's pseudo boxes.

    A point inside a pseudo box is foreground and regresses that box. A
    point inside several boxes takes the one with the nearest BEV center,
    the lower index on ties.

    Parameters
    ----------
    scene : Scene
        Scene with pseudo boxes

    Returns
    -------
    TargetAssignment
        Targets, foreground mask and assigned box index per point
    """
    n = scene.n_points
    boxes = as_box_matrix(scene.pseudo_boxes)
    targets = np.full((n, 7), np.nan)
    box_index = np.full(n, -1, dtype=np.int64)
    if len(boxes) and n:
        inside = points_in_boxes(scene.points, boxes)
        gap = np.hypot(
            scene.points[:, None, 0] - boxes[None, :, 0],
            scene.points[:, None, 1] - boxes[None, :, 1],
        )
        gap = np.where(inside, gap, np.inf)
        foreground = inside.any(axis=1)
        box_index[foreground] = np.argmin(gap[foreground], axis=1)
        targets[foreground] = boxes[box_index[foreground]]
    return TargetAssignment(targets=targets, mask=box_index >= 0, box_index=box_index)


def _signed_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Coordinate differences a - b with the theta column wrapped modulo pi."""
    diff = a - b
    diff[:, 6] = wrap_half_turn(a[:, 6] - b[:, 6])
    return diff


def estimate_uncertainty(pred_p: DensePrediction, pred_a: DensePrediction) -> UncertaintyField:
    """
    Branch disagreement U = |primary - auxiliary| per point and coordinate.

    Raises
    ------
    ValueError
        If the two predictions have different row counts
    """
    if pred_p.n_rows != pred_a.n_rows:
        raise ValueError(
            f"Row count mismatch: primary {pred_p.n_rows}, auxiliary {pred_a.n_rows}"
        )
    return UncertaintyField(np.abs(_signed_difference(pred_p.boxes, pred_a.boxes)))


def _as_rows(values) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(-1, 1)
    return array


def _regularize(L: np.ndarray, U: np.ndarray, lam: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Value and gradients of sum over columns of mean over rows of L*exp(-U) + lam*U."""
    rows = L.shape[0]
    if rows == 0:
        return 0.0, np.zeros_like(L), np.zeros_like(U)
    with np.errstate(over="ignore"):
        weight = np.exp(-U)
    value = float(np.sum(L * weight + lam * U)) / rows
    return value, weight / rows, (lam - L * weight) / rows


def regularized_loss(L, U, lam: float) -> float:
    """
    Uncertainty-regularized loss for per-row losses and uncertainties.

    Parameters
    ----------
    L, U : array_like
        Losses and uncertainties of shape (n, k); 1-D input is one column
    lam : float
        Penalty weight

    Returns
    -------
    float
        sum over columns of mean over rows of L * exp(-U) + lam * U
    """
    L, U = _as_rows(L), _as_rows(U)
    if L.shape != U.shape:
        raise ValueError(f"L {L.shape} and U {U.shape} must have the same shape")
    return _regularize(L, U, lam)[0]


def aggregate_granularity(U, level: str) -> np.ndarray:
    """
    Uncertainty at a granularity, broadcast back to (n, 7).

    'coordinate' keeps U, 'box' replaces every entry by its row sum and
    'cloud' replaces every entry by the grand sum.
    """
    U = np.asarray(U, dtype=float)
    if level == "coordinate":
        return U.copy()
    if level == "box":
        return np.broadcast_to(U.sum(axis=1, keepdims=True), U.shape).copy()
    if level == "cloud":
        return np.full(U.shape, U.sum())
    raise ValueError(f"Unknown granularity '{level}'")


def _regularize_at(
    L: np.ndarray, U: np.ndarray, lam: float, level: str
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Regularized loss at a granularity with gradients w.r.t. per-coordinate L and U."""
    if level == "coordinate":
        return _regularize(L, U, lam)
    if level == "box":
        value, d_row_l, d_row_u = _regularize(
            L.sum(axis=1, keepdims=True), U.sum(axis=1, keepdims=True), lam
        )
        return value, np.broadcast_to(d_row_l, L.shape), np.broadcast_to(d_row_u, U.shape)
    if level == "cloud":
        rows = L.shape[0]
        if rows == 0:
            return 0.0, np.zeros_like(L), np.zeros_like(U)
        value, d_l, d_u = _regularize(
            np.array([[L.sum() / rows]]), np.array([[U.sum()]]), lam
        )
        return value, np.full(L.shape, d_l[0, 0] / rows), np.full(U.shape, d_u[0, 0])
    raise ValueError(f"Unknown granularity '{level}'")


def total_loss(L_p_u: float, L_a_u: float, mu: float, obj_p: float = 0.0, obj_a: float = 0.0) -> float:
    """Total training loss: primary + mu * auxiliary + both objectness terms."""
    return float(L_p_u + mu * L_a_u + obj_p + obj_a)


def rule_uncertainty(
    box,
    scene: Optional[Scene] = None,
    kind: str = "distance",
    tau_x: float = TAU_DISTANCE,
    tau_n: float = TAU_NUMPTS,
    tau_v: float = TAU_VOLUME,
) -> float:
    """
    Hand-designed uncertainty of a pseudo box.

    Parameters
    ----------
    box : Box7 or sequence of float
        Pseudo box
    scene : Scene, optional
        Scene whose points are counted; required for 'numpts'
    kind : str
        'distance': min(d, tau_x) / tau_x with d the BEV distance;
        'numpts': tau_n / min(n, tau_n) with n the contained points, at least 1;
        'volume': tau_v / min(l*w*h, tau_v)

    Returns
    -------
    float
        Positive uncertainty value
    """
    box = as_box_array(box)
    if kind == "distance":
        distance = float(np.hypot(box[0], box[1]))
        return min(distance, tau_x) / tau_x
    if kind == "numpts":
        if scene is None:
            raise ValueError("The 'numpts' rule needs the scene points")
        count = max(len(points_in_box(scene.points, box)), 1)
        return tau_n / min(count, tau_n)
    if kind == "volume":
        volume = float(box[3] * box[4] * box[5])
        return tau_v / min(volume, tau_v)
    raise ValueError(f"Unknown rule kind '{kind}'")


def rule_uncertainty_field(scene: Scene, assignment: TargetAssignment, kind: str) -> np.ndarray:
    """Rule value of each foreground point's box, broadcast to 7 coordinates; zero elsewhere."""
    boxes = as_box_matrix(scene.pseudo_boxes)
    per_box = np.array([rule_uncertainty(b, scene, kind) for b in boxes])
    field = np.zeros((scene.n_points, 7))
    mask = assignment.mask
    if mask.any():
        field[mask] = per_box[assignment.box_index[mask], None]
    return field


def _coordinate_losses(pred: np.ndarray, targets: np.ndarray, kind: str, beta: float):
    residual = _signed_difference(pred, targets)
    magnitude = np.abs(residual)
    if kind == "l1":
        return magnitude, np.sign(residual)
    small = magnitude < beta
    loss = np.where(small, 0.5 * residual**2 / beta, magnitude - 0.5 * beta)
    slope = np.where(small, residual / beta, np.sign(residual))
    return loss, slope


def _objectness_bce(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    n = len(logits)
    if n == 0:
        return 0.0, np.zeros(0)
    value = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
    probabilities = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return value, (probabilities - labels) / n


def compute_losses(
    pred_p: DensePrediction,
    pred_a: DensePrediction,
    assignment: TargetAssignment,
    settings: LossSettings,
    rule_field: Optional[np.ndarray] = None,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """
    Training loss of one scene and its gradient w.r.t. both branch outputs.

    Parameters
    ----------
    pred_p, pred_a : DensePrediction
        Primary and auxiliary dense predictions
    assignment : TargetAssignment
        Targets from the pseudo boxes
    settings : LossSettings
        Loss hyperparameters
    rule_field : np.ndarray, optional
        (n, 7) rule uncertainties; required for the rule modes

    Returns
    -------
    tuple
        (LossBreakdown, {'primary': (n, 8), 'auxiliary': (n, 8)}) where the
        gradient columns are the 7 decoded box coordinates and the logit

    Raises
    ------
    NumericalOverflowError
        If the loss is not finite
    """
    n = pred_p.n_rows
    if pred_a.n_rows != n or len(assignment.mask) != n:
        raise ValueError("Predictions and assignment must have the same row count")
    mask = assignment.mask
    targets = assignment.targets[mask]
    boxes_p, boxes_a = pred_p.boxes[mask], pred_a.boxes[mask]

    L_p, slope_p = _coordinate_losses(boxes_p, targets, settings.loss_kind, settings.smooth_l1_beta)
    L_a, slope_a = _coordinate_losses(boxes_a, targets, settings.loss_kind, settings.smooth_l1_beta)

    mode = settings.uncertainty_mode
    flows = False
    if mode == "learned":
        disagreement = _signed_difference(boxes_p, boxes_a)
        U = np.abs(disagreement)
        slope_u = np.sign(disagreement)
        flows = not settings.stop_grad_uncertainty
    elif mode in RULE_KINDS:
        if rule_field is None:
            raise ValueError(f"Uncertainty mode '{mode}' needs a rule field")
        U = np.asarray(rule_field, dtype=float)[mask]
    else:
        U = np.zeros_like(L_p)

    reg_p, dL_p, dU_p = _regularize_at(L_p, U, settings.lam, settings.granularity)
    reg_a, dL_a, dU_a = _regularize_at(L_a, U, settings.lam, settings.granularity)
    labels = mask.astype(float)
    obj_p, d_logit_p = _objectness_bce(pred_p.logits, labels)
    obj_a, d_logit_a = _objectness_bce(pred_a.logits, labels)
    total = total_loss(reg_p, reg_a, settings.mu, obj_p, obj_a)
    if not np.isfinite(total):
        raise NumericalOverflowError()

    grad_p = np.zeros((n, 8))
    grad_a = np.zeros((n, 8))
    grad_p[mask, :7] = dL_p * slope_p
    grad_a[mask, :7] = settings.mu * dL_a * slope_a
    if flows:
        d_u = (dU_p + settings.mu * dU_a) * slope_u
        grad_p[mask, :7] += d_u
        grad_a[mask, :7] -= d_u
    grad_p[:, 7] = d_logit_p
    grad_a[:, 7] = d_logit_a

    n_fg = int(mask.sum())
    zeros = np.zeros(7)
    breakdown = LossBreakdown(
        coord_primary=L_p.mean(axis=0) if n_fg else zeros,
        coord_auxiliary=L_a.mean(axis=0) if n_fg else zeros,
        regularized_primary=reg_p,
        regularized_auxiliary=reg_a,
        objectness_primary=obj_p,
        objectness_auxiliary=obj_a,
        total=total,
        mean_uncertainty=U.mean(axis=0) if n_fg else zeros,
        n_foreground=n_fg,
    )
    return breakdown, {"primary": grad_p, "auxiliary": grad_a}


def box_uncertainties(
    field: UncertaintyField, assignment: TargetAssignment, n_boxes: int
) -> np.ndarray:
    """
    Mean point uncertainty per pseudo box.

    Returns
    -------
    np.ndarray
        Array of shape (n_boxes, 7); NaN rows for boxes without points
    """
    result = np.full((n_boxes, 7), np.nan)
    for j in range(n_boxes):
        members = assignment.box_index == j
        if members.any():
            result[j] = field.values[members].mean(axis=0)
    return result
