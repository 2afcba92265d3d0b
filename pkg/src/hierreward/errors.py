"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so each family stays distinct.
"""

from __future__ import annotations


class HierRewardError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HierRewardError, ValueError):
    """Invalid or inconsistent configuration."""


class DegenerateDataError(HierRewardError, ValueError):
    """Data is well-formed but carries no usable signal (zero variance, all ties, ...)."""


class DegenerateCalibrationError(DegenerateDataError):
    """Calibration samples have zero variance."""


class AllTiesError(DegenerateDataError):
    """A win rate was requested over outcomes that are all ties."""


class NoComparablePairsError(DegenerateDataError):
    """Every comparison pair was a holistic tie."""


class ValidationError(HierRewardError, ValueError):
    """Inputs violate a documented precondition (length mismatch, bad token, ...)."""


class NonFiniteGradientError(HierRewardError, FloatingPointError):
    """A PPO minibatch produced a non-finite gradient."""

    def __init__(self, minibatch_index: int, epoch: int):
        super().__init__(f"non-finite gradient in epoch {epoch}, minibatch {minibatch_index}")
        self.minibatch_index = minibatch_index
        self.epoch = epoch
