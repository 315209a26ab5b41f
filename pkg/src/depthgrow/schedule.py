"""Training schedules: per-stage epoch allocations plus optimizer settings."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .partition import StagePlan

OPTIMIZER_KINDS = ("sgd", "adam", "adamw")
LR_SCHEDULES = ("constant", "cosine")
SUPPORTED_LOSSES = ("cross-entropy",)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9            # sgd only
    betas: tuple[float, float] = (0.9, 0.999)  # adam/adamw only

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(
                f"unknown optimizer {self.kind!r}; expected one of "
                f"{OPTIMIZER_KINDS}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr,
                "weight_decay": self.weight_decay, "momentum": self.momentum,
                "betas": list(self.betas)}


@dataclass(frozen=True)
class ProgressiveSchedule:
    """Epochs per stage plus the shared training hyperparameters.

    The last stage must train for at least one epoch so the full network is
    always optimized end to end before inference.
    """

    plan: StagePlan
    epochs: tuple[int, ...]
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    seed: int = 0
    loss: str = "cross-entropy"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if len(self.epochs) != self.plan.num_stages:
            raise ConfigError(
                f"{len(self.epochs)} epoch entries for "
                f"{self.plan.num_stages} stages")
        if any(e < 0 for e in self.epochs):
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.plan.num_stages > 1 and self.epochs[-1] < 1:
            # A multi-stage curriculum that never trains its final stage
            # would deploy blocks that were never optimized. A single-stage
            # plan with zero epochs is allowed: it degenerates to evaluating
            # the initialization.
            raise ConfigError("the final stage needs at least one epoch")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss not in SUPPORTED_LOSSES:
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))

    @property
    def total_epochs(self) -> int:
        return sum(self.epochs)

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "epochs": list(self.epochs),
                "optimizer": self.optimizer.to_dict(),
                "batch_size": self.batch_size, "seed": self.seed,
                "loss": self.loss, "lr_schedule": self.lr_schedule}
