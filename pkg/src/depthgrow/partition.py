"""Balanced contiguous partitioning of an ordered block sequence into stages.

Given N ordered blocks and a requested stage count K, the partition is the
unique non-decreasing K-tuple of positive sizes summing to N whose entries
differ by at most one: K - (N mod K) groups of floor(N/K) followed by
(N mod K) groups of ceil(N/K). Non-decreasing order makes the tuple the
lexicographically smallest such partition, so the shallow early stages get
the smaller groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


def balanced_partition(n_blocks: int, n_stages: int) -> tuple[int, ...]:
    """Split ``n_blocks`` into ``n_stages`` contiguous group sizes.

    Returns the lexicographically smallest tuple of positive integers that
    sums to ``n_blocks`` with pairwise difference at most one.
    """
    if n_stages < 1:
        raise ConfigError(f"stage count must be >= 1, got {n_stages}")
    if n_blocks < 1:
        raise ConfigError(f"block count must be >= 1, got {n_blocks}")
    if n_stages > n_blocks:
        raise ConfigError(
            f"cannot split {n_blocks} blocks into {n_stages} nonempty stages"
        )
    small, remainder = divmod(n_blocks, n_stages)
    return (small,) * (n_stages - remainder) + (small + 1,) * remainder


@dataclass(frozen=True)
class StagePlan:
    """A contiguous, order-preserving assignment of blocks to stages.

    Block indices are 1-based to match the usual block numbering
    b_1 ... b_N; use :meth:`block_slice` for 0-based Python indexing.
    """

    total_blocks: int
    sizes: tuple[int, ...]
    cut_points: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if sum(self.sizes) != self.total_blocks:
            raise ConfigError(
                f"stage sizes {self.sizes} do not sum to {self.total_blocks}"
            )
        if any(s < 1 for s in self.sizes):
            raise ConfigError(f"stage sizes must be positive, got {self.sizes}")
        cuts = []
        acc = 0
        for s in self.sizes:
            acc += s
            cuts.append(acc)
        object.__setattr__(self, "cut_points", tuple(cuts))

    @property
    def num_stages(self) -> int:
        return len(self.sizes)

    @property
    def index_sets(self) -> tuple[tuple[int, ...], ...]:
        """1-based block indices per stage; concatenation is (1, ..., N)."""
        sets = []
        start = 1
        for cut in self.cut_points:
            sets.append(tuple(range(start, cut + 1)))
            start = cut + 1
        return tuple(sets)

    def block_slice(self, stage: int) -> slice:
        """0-based slice of the blocks belonging to stage ``stage`` (1-based)."""
        self._check_stage(stage)
        lo = 0 if stage == 1 else self.cut_points[stage - 2]
        return slice(lo, self.cut_points[stage - 1])

    def prefix_length(self, stage: int) -> int:
        """Number of blocks active once stage ``stage`` is reached (n_k)."""
        self._check_stage(stage)
        return self.cut_points[stage - 1]

    def _check_stage(self, stage: int) -> None:
        if not 1 <= stage <= self.num_stages:
            raise ConfigError(
                f"stage index {stage} out of range 1..{self.num_stages}"
            )

    def to_dict(self) -> dict:
        return {
            "total_blocks": self.total_blocks,
            "num_stages": self.num_stages,
            "sizes": list(self.sizes),
            "cut_points": list(self.cut_points),
            "index_ranges": [[idx[0], idx[-1]] for idx in self.index_sets],
        }


def make_plan(n_blocks: int, n_stages: int) -> StagePlan:
    """Build the full stage plan for ``n_blocks`` blocks in ``n_stages`` stages."""
    return StagePlan(n_blocks, balanced_partition(n_blocks, n_stages))
