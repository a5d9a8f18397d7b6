"""Accuracy-conditioned KL scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import BatchAccuracy, GroupResult, RhoVariant

__all__ = ["RhoFunction", "rho_eval", "beta_effective", "batch_mean_accuracy"]


@dataclass(frozen=True)
class RhoFunction:
    """Monotone, two-sided bounded map from batch accuracy to a KL multiplier."""

    variant: RhoVariant

    @classmethod
    def from_variant(cls, variant: RhoVariant | str) -> RhoFunction:
        variant = RhoVariant.parse(variant)
        if variant.kind == "constant" and not (variant.value is not None and variant.value > 0):
            raise ValueError("constant rho must be positive")
        return cls(variant)

    @property
    def rho_min(self) -> float:
        if self.variant.kind == "constant":
            return self.variant.value
        return 0.5

    @property
    def rho_max(self) -> float:
        if self.variant.kind == "constant":
            return self.variant.value
        return (math.tanh(1.0) + 1.0) / 2.0

    def __call__(self, x: float) -> float:
        return rho_eval(self, x)


def rho_eval(f: RhoFunction, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {x!r}")
    if f.variant.kind == "constant":
        return f.variant.value
    return (math.tanh(x) + 1.0) / 2.0


def beta_effective(beta: float, acc: BatchAccuracy, f: RhoFunction) -> float:
    return beta * rho_eval(f, acc.value)


def batch_mean_accuracy(groups: Sequence[GroupResult]) -> BatchAccuracy:
    """Mean reward over every rollout of the batch (not a mean of group means)."""
    rewards = [r for g in groups for r in g.rewards]
    if not rewards:
        raise ValueError("empty batch")
    return BatchAccuracy.from_rewards(rewards)
