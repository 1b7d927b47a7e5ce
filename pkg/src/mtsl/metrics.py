"""Relative multi-task performance versus single-task baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from mtsl.errors import ContractError


@dataclass(frozen=True)
class TaskMetric:
    task: str
    value: float
    lower_is_better: bool = False

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ContractError(f"metric for {self.task!r} is not finite: {self.value}")


def delta_mtl(
    multi: Sequence[TaskMetric],
    single: Sequence[TaskMetric],
    tasks: Iterable[str] | None = None,
) -> float:
    """Mean sign-adjusted relative change of multi vs single, in percent.

    ``tasks`` restricts the average to a subset (e.g. a designated pair).
    """
    m = {x.task: x for x in multi}
    s = {x.task: x for x in single}
    if set(m) != set(s):
        raise ContractError(f"task lists differ: {sorted(m)} vs {sorted(s)}")
    chosen = list(tasks) if tasks is not None else sorted(m)
    if not chosen:
        raise ContractError("no tasks to compare")
    total = 0.0
    for t in chosen:
        if t not in m:
            raise ContractError(f"unknown task {t!r}")
        mm, ss = m[t], s[t]
        if mm.lower_is_better != ss.lower_is_better:
            raise ContractError(f"task {t!r}: metric direction disagrees")
        if ss.value == 0:
            raise ContractError(f"task {t!r}: single-task baseline is zero")
        sign = -1.0 if ss.lower_is_better else 1.0
        total += sign * (mm.value - ss.value) / ss.value
    return 100.0 * total / len(chosen)


def delta_sd(multi: Sequence[TaskMetric], single: Sequence[TaskMetric], pair: tuple[str, str]) -> float:
    """ΔMTL restricted to a designated pair of tasks."""
    return delta_mtl(multi, single, tasks=pair)
