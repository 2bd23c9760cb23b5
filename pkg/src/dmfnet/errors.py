"""Exception types shared across the package."""


class DMFNetError(Exception):
    """Base class for package errors."""


class ConfigError(DMFNetError, ValueError):
    """Invalid configuration (group divisibility, bad ranges, unknown modes)."""


class ShapeError(DMFNetError, ValueError):
    """Array shape violates an operation's contract."""


class CheckpointError(DMFNetError, ValueError):
    """Malformed or mismatched checkpoint file."""


class DataError(DMFNetError, ValueError):
    """Missing or corrupt case files, illegal label values."""


class GradientError(DMFNetError, RuntimeError):
    """Non-finite gradient encountered by the optimizer."""


class TrainingDiverged(DMFNetError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, last_finite_loss):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"loss became non-finite at step {step}; last finite loss was {last_finite_loss}"
        )
