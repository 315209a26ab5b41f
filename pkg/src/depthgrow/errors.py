"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat
and the categories coarse.
"""


class DepthgrowError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(DepthgrowError):
    """Invalid or inconsistent configuration (bad preset name, schedule
    length mismatch, out-of-range stage index, ...)."""


class DataError(DepthgrowError):
    """Dataset could not be loaded or failed validation."""


class CheckpointError(DepthgrowError):
    """Checkpoint file is unreadable, corrupt, or does not match the
    requesting backbone spec."""


class TrainingDivergedError(DepthgrowError):
    """Training produced a non-finite loss; carries stage/epoch context."""

    def __init__(self, message: str, stage_index: int, epoch: int, loss_value: float):
        super().__init__(message)
        self.stage_index = stage_index
        self.epoch = epoch
        self.loss_value = loss_value
