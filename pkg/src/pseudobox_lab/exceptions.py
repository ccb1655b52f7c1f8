"""Exception types raised by pseudobox_lab."""

from typing import Optional


class PseudoboxLabError(Exception):
    """Base class for all package errors."""


class SceneOverconstrainedError(PseudoboxLabError):
    """Object placement could not find a non-overlapping slot."""

    def __init__(self, message: str = "scene overconstrained"):
        super().__init__(message)


class DegenerateClusterError(PseudoboxLabError):
    """A cluster has too few non-collinear points for a box fit."""

    def __init__(self, message: str = "degenerate cluster"):
        super().__init__(message)


class NumericalOverflowError(PseudoboxLabError):
    """A forward activation or loss became non-finite."""

    def __init__(self, message: str = "numerical overflow", step: Optional[int] = None):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step


class TapeMismatchError(PseudoboxLabError):
    """A tape was replayed against parameters it was not recorded with."""


class CheckpointError(PseudoboxLabError):
    """Checkpoint file is corrupt, truncated or belongs to another config."""


class ConfigError(PseudoboxLabError):
    """Configuration has unknown keys or invalid values."""


class DatasetError(PseudoboxLabError):
    """Dataset directory, manifest or scene file is missing or invalid."""
