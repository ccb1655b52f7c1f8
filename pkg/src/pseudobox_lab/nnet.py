"""
Per-point dense box regressor with a primary and a gamma-scaled auxiliary branch.

The network is a per-point MLP trunk followed by a scene mean-feature
concatenation and a two-layer head per branch. The first ``split_depth``
trunk layers are shared; the auxiliary branch mirrors the remaining trunk
layers and its head with widths scaled by gamma. Forward passes record a
``Tape`` from which ``backward`` computes exact gradients.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.special import expit

from .data_format import DensePrediction, Scene, wrap_angle
from .exceptions import NumericalOverflowError, TapeMismatchError
from .geometry import wrap_half_turn

logger = logging.getLogger(__name__)

BRANCHES = ("primary", "auxiliary")

# Head output: 7 box coordinates and one objectness logit
HEAD_OUTPUT_WIDTH = 8

DEFAULT_SIZE_PRIOR = (4.0, 2.0, 1.6)

# Gradients smaller than this are compared in absolute terms by the gradient check
RELATIVE_ERROR_FLOOR = 1e-4

# Share of skipped probes above which the gradient check warns
MAX_SKIPPED_SHARE = 0.5


@dataclass
class NetworkShape:
    """
    Layer widths of the two-branch network.

    Attributes
    ----------
    input_width : int
        Per-point input features (3 for raw xyz, 9 with grouping features)
    trunk_widths : tuple of int
        Output widths of the trunk layers
    head_width : int
        Hidden width of the primary head
    gamma : float
        Auxiliary width coefficient
    split_depth : int
        Number of trunk layers shared by both branches
    """
    input_width: int = 9
    trunk_widths: Tuple[int, ...] = (64, 128)
    head_width: int = 128
    gamma: float = 0.5
    split_depth: Optional[int] = None

    def __post_init__(self):
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        if self.input_width < 1 or self.head_width < 1 or any(w < 1 for w in self.trunk_widths):
            raise ValueError("All widths must be at least 1")
        if not self.trunk_widths:
            raise ValueError("The trunk needs at least one layer")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.split_depth is None:
            self.split_depth = len(self.trunk_widths)
        if not 0 <= self.split_depth <= len(self.trunk_widths):
            raise ValueError(f"split_depth must be in [0, {len(self.trunk_widths)}]")

    def scaled(self, width: int) -> int:
        """Auxiliary width for a primary width, at least 1."""
        return max(1, int(math.ceil(self.gamma * width - 1e-9)))

    def branch_widths(self, branch: str) -> List[int]:
        """Output widths of a branch's unshared trunk layers."""
        widths = list(self.trunk_widths[self.split_depth:])
        if branch == "auxiliary":
            widths = [self.scaled(w) for w in widths]
        return widths

    def head_hidden(self, branch: str) -> int:
        return self.scaled(self.head_width) if branch == "auxiliary" else self.head_width

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "trunk_widths": list(self.trunk_widths),
            "head_width": self.head_width,
            "gamma": self.gamma,
            "split_depth": self.split_depth,
        }


@dataclass
class ModelParams:
    """
    Named parameter arrays and the shape they instantiate.

    Attributes
    ----------
    arrays : dict of str to np.ndarray
        Weights of shape (fan_in, fan_out) and biases of shape (fan_out,)
    shape : NetworkShape
        Layer widths
    """
    arrays: Dict[str, np.ndarray]
    shape: NetworkShape

    def __post_init__(self):
        for name, array in self.arrays.items():
            if not np.all(np.isfinite(array)):
                raise ValueError(f"Parameter {name} is not finite")

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.shape)

    def without_branch(self, branch: str) -> "ModelParams":
        """Copy with every parameter of one branch removed."""
        prefix = f"{branch}."
        kept = {k: v.copy() for k, v in self.arrays.items() if not k.startswith(prefix)}
        return ModelParams(kept, self.shape)

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def _layer_plan(shape: NetworkShape) -> Dict[str, List[Tuple[str, int, int]]]:
    """Ordered (name prefix, fan_in, fan_out) per stream."""
    plan: Dict[str, List[Tuple[str, int, int]]] = {"shared": []}
    fan_in = shape.input_width
    for k in range(shape.split_depth):
        plan["shared"].append((f"trunk.{k}", fan_in, shape.trunk_widths[k]))
        fan_in = shape.trunk_widths[k]
    shared_out = fan_in
    for branch in BRANCHES:
        layers = []
        fan_in = shared_out
        for offset, width in enumerate(shape.branch_widths(branch)):
            k = shape.split_depth + offset
            layers.append((f"{branch}.trunk.{k}", fan_in, width))
            fan_in = width
        hidden = shape.head_hidden(branch)
        layers.append((f"{branch}.head.0", 2 * fan_in, hidden))
        layers.append((f"{branch}.head.1", hidden, HEAD_OUTPUT_WIDTH))
        plan[branch] = layers
    return plan


def init_params(
    widths: Sequence[int] = (64, 128),
    gamma: float = 0.5,
    seed=0,
    input_width: int = 9,
    head_width: int = 128,
    split_depth: Optional[int] = None,
) -> ModelParams:
    """
    Deterministic fan-in scaled uniform initialization.

    Hidden layers draw from U(-sqrt(6/fan_in), sqrt(6/fan_in)); output layers
    use a bound ten times smaller so initial boxes sit near the size prior.
    Biases start at zero.

    Parameters
    ----------
    widths : sequence of int, optional
        Trunk output widths (default: (64, 128))
    gamma : float, optional
        Auxiliary width coefficient (default: 0.5)
    seed : int or sequence of int, optional
        Seed of the draw
    input_width : int, optional
        Per-point feature count (default: 9)
    head_width : int, optional
        Primary head hidden width (default: 128)
    split_depth : int, optional
        Shared trunk layers (default: all)

    Returns
    -------
    ModelParams
        Freshly initialized parameters
    """
    shape = NetworkShape(
        input_width=input_width,
        trunk_widths=tuple(widths),
        head_width=head_width,
        gamma=gamma,
        split_depth=split_depth,
    )
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for stream, layers in _layer_plan(shape).items():
        for name, fan_in, fan_out in layers:
            bound = math.sqrt(6.0 / fan_in)
            if name.endswith("head.1"):
                bound *= 0.1
            arrays[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            arrays[f"{name}.bias"] = np.zeros(fan_out)
    return ModelParams(arrays, shape)


def point_features(
    points: np.ndarray,
    input_scale: float = 40.0,
    local_features: bool = True,
    radius: float = 2.0,
) -> np.ndarray:
    """
    Per-point network input.

    Raw coordinates divided by ``input_scale``; with ``local_features`` the
    offset to the neighbourhood centroid and the neighbourhood standard
    deviation (both in meters) within ``radius`` are appended. Neighbourhoods
    include the point itself.

    Returns
    -------
    np.ndarray
        Features of shape (n, 3) or (n, 9)
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    scaled = points / input_scale
    if not local_features:
        return scaled
    n = len(points)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    adjacency = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    counts = np.asarray(adjacency.sum(axis=1)).reshape(-1, 1)
    centroid = (adjacency @ points) / counts
    second = (adjacency @ (points * points)) / counts
    spread = np.sqrt(np.maximum(second - centroid * centroid, 0.0))
    return np.hstack([scaled, centroid - points, spread])


def scene_features(scene: Scene, cfg) -> np.ndarray:
    """Network input for a scene under a training config."""
    return point_features(
        scene.points,
        input_scale=cfg.input_scale,
        local_features=cfg.local_features,
        radius=cfg.neighborhood_radius,
    )


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``x @ weight + bias``."""
    return x @ weight + bias


def linear_backward(
    x: np.ndarray, weight: np.ndarray, dout: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweight, dbias) of an affine map."""
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


@dataclass
class _LayerRecord:
    name: str
    x: np.ndarray
    pre: np.ndarray


@dataclass
class _BranchRecord:
    trunk: List[_LayerRecord]
    pooled_from: np.ndarray
    head_input: np.ndarray
    head_pre: np.ndarray
    head_act: np.ndarray
    sizes: np.ndarray


@dataclass
class Tape:
    """
    Forward intermediates needed for reverse-mode differentiation.

    Attributes
    ----------
    n_points : int
        Rows of the recorded forward pass
    shared : list
        Records of the shared trunk layers
    branches : dict
        Per-branch trunk, pooling and head records
    signature : tuple
        (name, shape) of every parameter used, for mismatch detection
    arrays : dict
        The parameter arrays the forward pass read
    """
    n_points: int
    shared: List[_LayerRecord]
    branches: Dict[str, _BranchRecord]
    signature: Tuple[Tuple[str, Tuple[int, ...]], ...]
    arrays: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _signature(arrays: Dict[str, np.ndarray]) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
    return tuple((name, arrays[name].shape) for name in sorted(arrays))


def _check_finite(array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericalOverflowError()


def forward_dense(
    params: ModelParams,
    points: np.ndarray,
    features: Optional[np.ndarray] = None,
    size_prior: Sequence[float] = DEFAULT_SIZE_PRIOR,
    branches: Sequence[str] = BRANCHES,
) -> Tuple[Optional[DensePrediction], Optional[DensePrediction], Tape]:
    """
    Dense per-point box prediction from both branches.

    Decoding: position = point + raw offset; sizes = exp(raw) * size prior;
    theta = raw, wrapped; objectness = logistic(raw logit). Both branches
    read the same shared trunk features.

    Parameters
    ----------
    params : ModelParams
        Network parameters
    points : np.ndarray
        Points of shape (n, 3), n >= 1
    features : np.ndarray, optional
        Precomputed network input; defaults to raw xyz
    size_prior : sequence of float, optional
        (l, w, h) prior in meters
    branches : sequence of str, optional
        Branches to evaluate (default: both)

    Returns
    -------
    tuple
        (primary prediction, auxiliary prediction, tape); a branch that was
        not requested is None

    Raises
    ------
    NumericalOverflowError
        If any activation or decoded size is non-finite
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n < 1:
        raise ValueError("forward_dense needs at least one point")
    x = points if features is None else np.asarray(features, dtype=float)
    if x.shape != (n, params.shape.input_width):
        raise ValueError(
            f"Features have shape {x.shape}, network expects (n, {params.shape.input_width})"
        )
    arrays = params.arrays
    plan = _layer_plan(params.shape)
    prior = np.asarray(size_prior, dtype=float)

    with np.errstate(over="ignore", invalid="ignore"):
        shared_records = []
        h = x
        for name, _, _ in plan["shared"]:
            pre = linear_forward(h, arrays[f"{name}.weight"], arrays[f"{name}.bias"])
            _check_finite(pre)
            shared_records.append(_LayerRecord(name, h, pre))
            h = np.maximum(pre, 0.0)

        predictions: Dict[str, DensePrediction] = {}
        records: Dict[str, _BranchRecord] = {}
        for branch in branches:
            hb = h
            trunk_records = []
            for name, _, _ in plan[branch][:-2]:
                pre = linear_forward(hb, arrays[f"{name}.weight"], arrays[f"{name}.bias"])
                _check_finite(pre)
                trunk_records.append(_LayerRecord(name, hb, pre))
                hb = np.maximum(pre, 0.0)
            pooled = np.broadcast_to(hb.mean(axis=0), hb.shape)
            head_input = np.hstack([hb, pooled])
            head0, head1 = plan[branch][-2][0], plan[branch][-1][0]
            head_pre = linear_forward(
                head_input, arrays[f"{head0}.weight"], arrays[f"{head0}.bias"]
            )
            _check_finite(head_pre)
            head_act = np.maximum(head_pre, 0.0)
            raw = linear_forward(head_act, arrays[f"{head1}.weight"], arrays[f"{head1}.bias"])
            _check_finite(raw)

            sizes = np.exp(raw[:, 3:6]) * prior
            _check_finite(sizes)
            boxes = np.empty((n, 7))
            boxes[:, :3] = points + raw[:, :3]
            boxes[:, 3:6] = sizes
            boxes[:, 6] = wrap_angle(raw[:, 6])
            predictions[branch] = DensePrediction(
                boxes=boxes, objectness=expit(raw[:, 7]), logits=raw[:, 7].copy(), branch=branch
            )
            records[branch] = _BranchRecord(
                trunk_records, hb, head_input, head_pre, head_act, sizes
            )

    used = {k: v for k, v in arrays.items() if k.startswith("trunk.") or k.split(".")[0] in branches}
    tape = Tape(
        n_points=n,
        shared=shared_records,
        branches=records,
        signature=_signature(used),
        arrays=used,
    )
    return predictions.get("primary"), predictions.get("auxiliary"), tape


def backward(
    tape: Tape,
    loss_grad: Dict[str, np.ndarray],
    params: Optional[ModelParams] = None,
) -> Dict[str, np.ndarray]:
    """
    Exact parameter gradients of a scalar loss recorded on a tape.

    Parameters
    ----------
    tape : Tape
        Tape from the matching ``forward_dense`` call
    loss_grad : dict of str to np.ndarray
        Per-branch gradient of the loss with respect to the decoded boxes
        (columns 0-6) and the objectness logit (column 7), shape (n, 8)
    params : ModelParams, optional
        When given, must be the parameters the tape was recorded with

    Returns
    -------
    dict of str to np.ndarray
        Gradient for every parameter the forward pass touched

    Raises
    ------
    TapeMismatchError
        If the gradients or parameters do not belong to this tape
    """
    if params is not None:
        current = {k: params.arrays[k] for k, _ in tape.signature if k in params.arrays}
        if _signature(current) != tape.signature:
            raise TapeMismatchError("Parameters do not match the recorded tape")
    for branch, grad in loss_grad.items():
        if branch not in tape.branches:
            raise TapeMismatchError(f"Branch '{branch}' was not recorded on the tape")
        if grad.shape != (tape.n_points, HEAD_OUTPUT_WIDTH):
            raise TapeMismatchError(
                f"Gradient for '{branch}' has shape {grad.shape}, "
                f"expected ({tape.n_points}, {HEAD_OUTPUT_WIDTH})"
            )

    arrays = tape.arrays
    grads = {name: np.zeros_like(array) for name, array in arrays.items()}
    n = tape.n_points
    shared_grad = None

    for branch, record in tape.branches.items():
        d_raw = np.array(loss_grad.get(branch, np.zeros((n, HEAD_OUTPUT_WIDTH))), dtype=float)
        d_raw[:, 3:6] *= record.sizes
        prefix = f"{branch}.head"
        d_act, grads[f"{prefix}.1.weight"], grads[f"{prefix}.1.bias"] = linear_backward(
            record.head_act, arrays[f"{prefix}.1.weight"], d_raw
        )
        d_pre = d_act * (record.head_pre > 0)
        d_input, grads[f"{prefix}.0.weight"], grads[f"{prefix}.0.bias"] = linear_backward(
            record.head_input, arrays[f"{prefix}.0.weight"], d_pre
        )
        width = record.pooled_from.shape[1]
        d_h = d_input[:, :width] + d_input[:, width:].sum(axis=0, keepdims=True) / n
        for layer in reversed(record.trunk):
            d_pre = d_h * (layer.pre > 0)
            d_h, grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = linear_backward(
                layer.x, arrays[f"{layer.name}.weight"], d_pre
            )
        shared_grad = d_h if shared_grad is None else shared_grad + d_h

    if shared_grad is not None:
        for layer in reversed(tape.shared):
            d_pre = shared_grad * (layer.pre > 0)
            shared_grad, grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = (
                linear_backward(layer.x, arrays[f"{layer.name}.weight"], d_pre)
            )
    return grads


@dataclass
class AdamState:
    """
    Adam moment estimates.

    Attributes
    ----------
    step : int
        Number of updates applied so far
    m, v : dict of str to np.ndarray
        First and second moment estimates per parameter
    """
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    """Euclidean norm over all gradient arrays."""
    return float(math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def adam_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    wd: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip: Optional[float] = 10.0,
) -> Tuple[ModelParams, AdamState, float]:
    """
    One Adam update with decoupled weight decay and global norm clipping.

    Parameters
    ----------
    params : ModelParams
        Current parameters (not modified)
    grads : dict of str to np.ndarray
        Gradients; parameters without an entry get a zero gradient
    state : AdamState
        Current moments (not modified)
    lr, wd : float
        Learning rate and decoupled weight decay
    betas, eps : optional
        Adam constants
    clip : float, optional
        Global gradient norm limit (default: 10); None disables clipping

    Returns
    -------
    tuple
        (updated params, updated state, pre-clip gradient norm)
    """
    full = {k: grads.get(k, np.zeros_like(v)) for k, v in params.arrays.items()}
    for name, grad in full.items():
        if grad.shape != params.arrays[name].shape:
            raise ValueError(f"Gradient shape mismatch for {name}")
    norm = global_norm(full)
    scale = clip / norm if clip is not None and norm > clip else 1.0

    beta1, beta2 = betas
    step = state.step + 1
    new_arrays, new_m, new_v = {}, {}, {}
    for name in sorted(params.arrays):
        p = params.arrays[name]
        g = full[name] * scale
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_arrays[name] = p - lr * wd * p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
        _check_finite(new_arrays[name])
    return ModelParams(new_arrays, params.shape), AdamState(step, new_m, new_v), norm


def _kink_pattern(tape: Tape, pred_p, pred_a, assignment) -> np.ndarray:
    """Signs of every ReLU input and absolute-value argument of the training loss."""
    parts = [layer.pre > 0 for layer in tape.shared]
    for record in tape.branches.values():
        parts.extend(layer.pre > 0 for layer in record.trunk)
        parts.append(record.head_pre > 0)
    mask = assignment.mask
    for a, b in (
        (pred_p.boxes, assignment.targets),
        (pred_a.boxes, assignment.targets),
        (pred_p.boxes, pred_a.boxes),
    ):
        diff = a[mask] - b[mask]
        diff[:, 6] = wrap_half_turn(a[mask, 6] - b[mask, 6])
        parts.append(diff > 0)
    return np.concatenate([p.ravel() for p in parts])


def finite_diff_check(
    params: ModelParams,
    batch: Scene,
    cfg,
    fraction: float = 0.05,
    epsilon: float = 1e-5,
    seed: int = 0,
    grad_fault: Optional[float] = None,
    return_counts: bool = False,
):
    """
    Compare backward() gradients of the full training loss with central differences.

    Probes whose two evaluations straddle a ReLU or absolute-value kink are
    skipped, since the loss has no derivative there.

    Parameters
    ----------
    params : ModelParams
        Parameters to check at
    batch : Scene
        Small scene (at most 64 points) with pseudo boxes
    cfg : TrainConfig
        Loss and feature settings
    fraction : float, optional
        Share of parameters probed (default: 0.05)
    epsilon : float, optional
        Central difference step (default: 1e-5)
    seed : int, optional
        Seed of the parameter subset
    grad_fault : float, optional
        Multiplier applied to the analytic gradient; used to verify that the
        check detects wrong gradients
    return_counts : bool, optional
        Also return the number of sampled and skipped parameters

    Returns
    -------
    float or tuple
        Maximum relative error over the compared parameters, infinite when
        every sampled parameter was skipped; with ``return_counts``,
        (error, sampled, skipped)
    """
    from .uncertainty import assign_targets, compute_losses, rule_uncertainty_field

    if batch.n_points > 64:
        raise ValueError("finite_diff_check expects at most 64 points")
    features = scene_features(batch, cfg)
    assignment = assign_targets(batch)
    settings = cfg.loss_settings()
    rules = None
    if settings.uncertainty_mode in ("distance", "numpts", "volume"):
        rules = rule_uncertainty_field(batch, assignment, settings.uncertainty_mode)

    def evaluate(p: ModelParams):
        pred_p, pred_a, tape = forward_dense(p, batch.points, features, cfg.size_prior)
        breakdown, loss_grad = compute_losses(pred_p, pred_a, assignment, settings, rules)
        return breakdown.total, tape, loss_grad, _kink_pattern(tape, pred_p, pred_a, assignment)

    _, tape, loss_grad, _ = evaluate(params)
    analytic = backward(tape, loss_grad, params)
    if grad_fault is not None:
        analytic = {k: v * grad_fault for k, v in analytic.items()}

    rng = np.random.default_rng(seed)
    names = sorted(params.arrays)
    sizes = np.array([params.arrays[k].size for k in names])
    total = int(sizes.sum())
    n_probe = max(8, int(round(fraction * total)))
    probes = np.sort(rng.choice(total, size=min(n_probe, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    skipped = 0
    shifted = params.copy()
    for flat in probes:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, local = names[k], int(flat - offsets[k])
        view = shifted.arrays[name].reshape(-1)
        base = view[local]
        view[local] = base + epsilon
        plus, _, _, plus_pattern = evaluate(shifted)
        view[local] = base - epsilon
        minus, _, _, minus_pattern = evaluate(shifted)
        view[local] = base
        if not np.array_equal(plus_pattern, minus_pattern):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * epsilon)
        exact = float(analytic[name].reshape(-1)[local])
        denom = max(abs(exact), abs(numeric), RELATIVE_ERROR_FLOOR)
        worst = max(worst, abs(exact - numeric) / denom)
    if skipped == len(probes):
        worst = math.inf
    level = logging.WARNING if skipped > MAX_SKIPPED_SHARE * len(probes) else logging.DEBUG
    logger.log(
        level,
        "Finite-difference check over %d parameters (%d at kinks skipped): %.3e",
        len(probes),
        skipped,
        worst,
    )
    if return_counts:
        return worst, len(probes), skipped
    return worst
