"""Target global sparsity as a function of the training step."""
from __future__ import annotations

from dataclasses import dataclass

KINDS = ("cubic", "constant", "lrr_cycle")


@dataclass(frozen=True)
class SparsitySchedule:
    kind: str = "cubic"
    s_final: float = 0.9
    start_step: int = 0
    end_step: int = 1
    prune_fraction: float = 0.2  # lrr_cycle only: fraction of remaining weights removed per cycle

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.s_final < 1.0:
            raise ValueError(f"s_final must lie in [0, 1), got {self.s_final}")
        if self.kind == "cubic" and self.start_step >= self.end_step:
            raise ValueError("start_step must precede end_step")
        if self.kind == "lrr_cycle" and not 0.0 < self.prune_fraction < 1.0:
            raise ValueError(f"prune_fraction must lie in (0, 1), got {self.prune_fraction}")


def cubic_sparsity(step: float, s_final: float, start: float, end: float) -> float:
    if step <= start:
        return 0.0
    if step >= end:
        return s_final
    frac = (step - start) / (end - start)
    return s_final * (1.0 - (1.0 - frac) ** 3)


def lrr_cycle_sparsity(cycle: int, prune_fraction: float) -> float:
    """Sparsity held during LRR cycle ``cycle`` (1-based); cycle 0 is dense."""
    if cycle < 0:
        raise ValueError("cycle must be non-negative")
    return 1.0 - (1.0 - prune_fraction) ** cycle


def sparsity_at(schedule: SparsitySchedule, step: int, cycle: int = 1) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.kind == "constant":
        return schedule.s_final
    if schedule.kind == "cubic":
        return cubic_sparsity(step, schedule.s_final, schedule.start_step, schedule.end_step)
    return lrr_cycle_sparsity(cycle, schedule.prune_fraction)
