"""
Training configuration.

``TrainConfig`` holds every knob of a self-training run. Config files are
flat YAML mappings; each field carries its JSON Schema fragment in the
dataclass metadata, and the assembled schema validates files and
command-line overrides alike.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import jsonschema
import yaml

from .data_format import canonical_hash
from .exceptions import ConfigError
from .pseudolabel import ClusterParams
from .uncertainty import GRANULARITIES, UNCERTAINTY_MODES, LossSettings

logger = logging.getLogger(__name__)

_NONNEG = {"type": "number", "minimum": 0}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_BOOL = {"type": "boolean"}
_STRING = {"type": "string"}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}


def _pair(item: dict) -> dict:
    return {"type": "array", "items": item, "minItems": 2, "maxItems": 2}


def _knob(default, schema: dict, **kwargs):
    if isinstance(default, (list, tuple)):
        return field(default_factory=lambda: tuple(default), metadata={"schema": schema}, **kwargs)
    return field(default=default, metadata={"schema": schema}, **kwargs)


# Aliases accepted in files and on the command line
KEY_ALIASES = {"lambda": "lam"}

# Fields that determine parameter shapes; checkpoints are bound to their hash
SHAPE_FIELDS = (
    "gamma",
    "trunk_widths",
    "head_width",
    "split_depth",
    "local_features",
)


@dataclass
class TrainConfig:
    """
    Every setting of seed training, self-training and evaluation.

    Defaults follow the reference training protocol where it fixes a value (lambda,
    gamma, optimizer, schedule shape, augmentation ranges, ten rounds);
    epoch and point counts are desk-scale.
    """
    # uncertainty-aware loss
    lam: float = _knob(1e-5, _NONNEG)
    mu: float = _knob(1.0, _NONNEG)
    gamma: float = _knob(0.5, _POSITIVE)
    granularity: str = _knob("coordinate", {"enum": list(GRANULARITIES)})
    uncertainty_mode: str = _knob("learned", {"enum": list(UNCERTAINTY_MODES)})
    stop_grad_uncertainty: bool = _knob(False, _BOOL)
    loss_kind: str = _knob("l1", {"enum": ["l1", "smooth_l1"]})
    smooth_l1_beta: float = _knob(1.0, _POSITIVE)

    # network
    trunk_widths: Tuple[int, ...] = _knob((64, 128), {"type": "array", "items": _POS_INT, "minItems": 1})
    head_width: int = _knob(128, _POS_INT)
    split_depth: Optional[int] = _knob(None, {"type": ["integer", "null"], "minimum": 0})
    input_scale: float = _knob(40.0, _POSITIVE)
    local_features: bool = _knob(True, _BOOL)
    neighborhood_radius: float = _knob(2.0, _POSITIVE)
    size_prior: Tuple[float, float, float] = _knob(
        (4.0, 2.0, 1.6), {"type": "array", "items": _POSITIVE, "minItems": 3, "maxItems": 3}
    )

    # optimization
    epochs: int = _knob(20, _NONNEG_INT)
    batch_size: int = _knob(2, _POS_INT)
    points_per_scene: int = _knob(1024, _POS_INT)
    lr: float = _knob(0.01, _POSITIVE)
    lr_decay: float = _knob(0.1, _UNIT)
    lr_milestones: Tuple[float, ...] = _knob((35 / 80, 45 / 80), {"type": "array", "items": _UNIT})
    lr_floor: float = _knob(1e-7, _NONNEG)
    weight_decay: float = _knob(0.01, _NONNEG)
    adam_betas: Tuple[float, float] = _knob(
        (0.9, 0.999), _pair({"type": "number", "minimum": 0, "exclusiveMaximum": 1})
    )
    adam_eps: float = _knob(1e-8, _POSITIVE)
    grad_clip: Optional[float] = _knob(10.0, {"type": ["number", "null"], "exclusiveMinimum": 0})

    # augmentation
    augment: bool = _knob(True, _BOOL)
    flip: bool = _knob(True, _BOOL)
    rotation_range: Tuple[float, float] = _knob((-0.785, 0.785), _pair({"type": "number"}))
    scale_range: Tuple[float, float] = _knob((0.95, 1.05), _pair(_POSITIVE))
    shuffle_train_points: bool = _knob(True, _BOOL)

    # self-training
    rounds: int = _knob(10, _NONNEG_INT)
    warm_start: bool = _knob(False, _BOOL)
    seed_source: str = _knob("cluster", {"enum": ["cluster", "file"]})
    relabel_threshold: float = _knob(0.7, _NONNEG)
    eval_score_threshold: float = _knob(0.1, _NONNEG)
    nms_iou: float = _knob(0.1, _UNIT)
    eval_iou: float = _knob(0.25, _UNIT)

    # clustering seeds
    ground_threshold: float = _knob(0.2, {"type": "number"})
    cluster_eps: float = _knob(0.8, _POSITIVE)
    cluster_min_pts: int = _knob(3, _POS_INT)
    min_cluster_size: int = _knob(3, _POS_INT)

    # bookkeeping
    seed: int = _knob(0, _NONNEG_INT)
    workers: int = _knob(1, _POS_INT)
    dataset: str = _knob("data/synthetic", _STRING)
    output_dir: str = _knob("runs/default", _STRING)

    def __post_init__(self):
        for name in ("trunk_widths", "size_prior", "lr_milestones", "adam_betas", "rotation_range", "scale_range"):
            setattr(self, name, tuple(getattr(self, name)))
        errors = sorted(jsonschema.Draft7Validator(config_schema()).iter_errors(self._plain()), key=str)
        if errors:
            raise ConfigError("; ".join(_describe(e) for e in errors))
        if self.split_depth is not None and self.split_depth > len(self.trunk_widths):
            raise ConfigError(
                f"split_depth {self.split_depth} exceeds the {len(self.trunk_widths)} trunk layers"
            )
        if self.rotation_range[0] > self.rotation_range[1] or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("Augmentation ranges must be ordered (low, high)")

    def _plain(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def to_dict(self) -> Dict[str, Any]:
        return self._plain()

    @property
    def input_width(self) -> int:
        return 9 if self.local_features else 3

    def config_hash(self) -> str:
        """Hash of the fields that fix parameter shapes."""
        plain = self._plain()
        return canonical_hash({name: plain[name] for name in SHAPE_FIELDS})

    def loss_settings(self) -> LossSettings:
        return LossSettings(
            lam=self.lam,
            mu=self.mu,
            granularity=self.granularity,
            uncertainty_mode=self.uncertainty_mode,
            stop_grad_uncertainty=self.stop_grad_uncertainty,
            loss_kind=self.loss_kind,
            smooth_l1_beta=self.smooth_l1_beta,
        )

    def cluster_params(self) -> ClusterParams:
        return ClusterParams(
            ground_threshold=self.ground_threshold,
            eps=self.cluster_eps,
            min_pts=self.cluster_min_pts,
            min_cluster_size=self.min_cluster_size,
        )

    def learning_rate(self, epoch: int) -> float:
        """Step-decayed learning rate at an epoch, clipped from below at lr_floor."""
        passed = sum(1 for m in self.lr_milestones if epoch >= int(round(m * self.epochs)))
        return max(self.lr * self.lr_decay**passed, self.lr_floor)

    def replace(self, **changes) -> "TrainConfig":
        values = self._plain()
        values.update(_canonical_keys(changes))
        return TrainConfig(**values)


def config_schema() -> dict:
    """JSON Schema of a config mapping, assembled from the field metadata."""
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {f.name: f.metadata["schema"] for f in fields(TrainConfig)},
    }


def _describe(error: jsonschema.ValidationError) -> str:
    where = ".".join(str(p) for p in error.absolute_path) or "<config>"
    return f"{where}: {error.message}"


def _accepts_number(schema: dict) -> bool:
    kinds = schema.get("type", [])
    return "number" in ([kinds] if isinstance(kinds, str) else kinds)


def _canonical_keys(values: Dict[str, Any]) -> Dict[str, Any]:
    schemas = {f.name: f.metadata["schema"] for f in fields(TrainConfig)}
    result = {}
    for key, value in values.items():
        name = KEY_ALIASES.get(key, key).replace("-", "_")
        name = KEY_ALIASES.get(name, name)
        if name not in schemas:
            raise ConfigError(f"Unknown config key '{key}'")
        # YAML 1.1 reads exponents without a decimal point, such as 1e-4, as strings
        if isinstance(value, str) and _accepts_number(schemas[name]):
            try:
                value = float(value)
            except ValueError:
                pass
        result[name] = value
    return result


def parse_overrides(tokens: Iterable[str]) -> Dict[str, Any]:
    """
    Parse ``--key=value`` tokens into a config mapping.

    Values follow YAML scalar rules, so ``--lam=1e-4`` is a float,
    ``--trunk_widths=[32,64]`` a list and ``--split_depth=null`` None.

    Raises
    ------
    ConfigError
        If a token is not of the form ``--key=value`` or names an unknown key
    """
    values: Dict[str, Any] = {}
    for token in tokens:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"Expected --key=value, got '{token}'")
        key, raw = token[2:].split("=", 1)
        try:
            values[key] = yaml.safe_load(raw) if raw != "" else ""
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse value for '{key}': {e}") from e
    return _canonical_keys(values)


def load_config(
    filepath: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> TrainConfig:
    """
    Load a flat YAML config and apply overrides.

    Parameters
    ----------
    filepath : str or Path, optional
        YAML file; defaults are used when omitted
    overrides : dict, optional
        Values taking precedence over the file

    Returns
    -------
    TrainConfig
        Validated configuration

    Raises
    ------
    ConfigError
        If the file is unreadable, not a mapping, or has unknown or invalid keys
    """
    values: Dict[str, Any] = {}
    if filepath is not None:
        filepath = Path(filepath)
        if not filepath.exists():
            raise ConfigError(f"Config file not found: {filepath}")
        try:
            with open(filepath, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {filepath}: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{filepath} must hold a flat mapping")
        values.update(_canonical_keys(loaded))
    values.update(_canonical_keys(overrides or {}))
    try:
        config = TrainConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    logger.debug("Loaded config %s", config.config_hash()[:12])
    return config


def save_config(config: TrainConfig, filepath: Union[str, Path]) -> None:
    """Write a config as a flat YAML mapping."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)
