"""
HOLD Errors Module
==================
Exception hierarchy shared by every module.

The CLI catches HoldError at the top level and turns it into an actionable
message plus a nonzero exit code.
"""

from typing import Optional


class HoldError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(HoldError, ValueError):
    """Malformed or inconsistent configuration value."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NotPositiveDefinite(HoldError, ValueError):
    """A 3x3 covariance has a pivot at or below the usable threshold."""

    def __init__(self, pivot_index: int, pivot_value: float, t: Optional[float] = None):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        self.t = t
        where = f" at t={t:.3e}" if t is not None else ""
        super().__init__(
            f"covariance is not numerically positive definite{where}: "
            f"pivot {pivot_index} = {pivot_value:.3e}"
        )


class TimeOutOfRange(HoldError, ValueError):
    """A time argument falls outside the admissible interval."""


class SamplerDivergence(HoldError, RuntimeError):
    """Non-finite state produced while sampling."""

    def __init__(self, step: int, t: float):
        self.step = step
        self.t = t
        super().__init__(f"non-finite sampler state at step {step} (model time {t:.6g})")


class StepSizeUnderflow(HoldError, RuntimeError):
    """The adaptive ODE integrator could not make progress."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(f"ODE step size underflow at model time {t:.6g}. {message}".strip())


class TrainingDiverged(HoldError, RuntimeError):
    """NaN/Inf loss during training; the offending batch was dumped."""

    def __init__(self, iteration: int, dump_path: str):
        self.iteration = iteration
        self.dump_path = dump_path
        super().__init__(f"non-finite loss at iteration {iteration}; batch dumped to {dump_path}")


class CheckpointError(HoldError, OSError):
    """Checkpoint file missing, unreadable or malformed."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
