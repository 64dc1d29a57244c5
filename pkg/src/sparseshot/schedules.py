"""Exclusivity-threshold schedules theta_t over optimizer steps."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import InvalidConfig, RangeError


class Kind(str, enum.Enum):
    FIXED = "fixed"
    LINEAR = "linear"
    SIGMOID = "sigmoid"
    LITERAL_SIGMOID = "literal-sigmoid"


@dataclass(frozen=True)
class ScheduleSpec:
    kind: Kind = Kind.SIGMOID
    rho_max: float = 0.75
    steepness: float = 12.0
    total_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not (0.0 < self.rho_max <= 1.0):
            raise InvalidConfig(f"rho_max must lie in (0, 1], got {self.rho_max}")
        if not self.steepness > 0:
            raise InvalidConfig(f"steepness must be positive, got {self.steepness}")
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise InvalidConfig(f"total_steps must be a positive integer, got {self.total_steps}")

    def with_steps(self, total_steps: int) -> "ScheduleSpec":
        return replace(self, total_steps=int(total_steps))


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def threshold_at(spec: ScheduleSpec, step: int) -> float:
    if not (0 <= step <= spec.total_steps):
        raise RangeError(f"step {step} outside [0, {spec.total_steps}]")
    t = step / spec.total_steps
    if spec.kind is Kind.FIXED:
        theta = spec.rho_max
    elif spec.kind is Kind.LINEAR:
        theta = spec.rho_max * t
    elif spec.kind is Kind.SIGMOID:
        k = spec.steepness
        theta = spec.rho_max * _logistic(k * t - k / 2)
    else:
        theta = _logistic(spec.rho_max * t)
    return min(1.0, max(0.0, theta))
