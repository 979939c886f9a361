"""Alignment metrics and the composite fitness with its pull-to-zero penalty.

The search objective is ``MSE(y, f(x)) + gamma * 0.5 * (f(-delta)^2 + f(delta)^2)``
with the anchor ``delta = 2 * max|x_train|`` frozen per layer. The penalty
discourages expressions that grow without bound outside the activation range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import Expr, evaluate

__all__ = [
    "FitnessConfig",
    "mse",
    "r_squared",
    "anchor_delta",
    "composite_fitness",
]

PENALTY_WEIGHT_DEFAULT = 0.005


@dataclass(frozen=True)
class FitnessConfig:
    """Penalty weight and anchor rule.

    ``delta=None`` applies the dynamic rule ``2 * max|x|`` to whatever inputs a
    fitness call receives. Search code freezes the anchor once per layer from
    the train split (via :meth:`resolved`) so train and validation fitness use
    the same objective.
    """

    gamma: float = PENALTY_WEIGHT_DEFAULT
    delta: float | None = None

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive")

    def resolve_delta(self, inputs) -> float:
        return self.delta if self.delta is not None else anchor_delta(inputs)

    def resolved(self, train_inputs) -> "FitnessConfig":
        """Freeze the anchor from the train inputs."""
        return FitnessConfig(self.gamma, self.resolve_delta(train_inputs))


def mse(pred, target) -> float:
    """Mean squared difference."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("pred and target must be nonempty vectors of equal length")
    return float(np.mean(np.square(pred - target)))


def r_squared(pred, target) -> float:
    """Coefficient of determination, 1 - SS_res/SS_tot about the target mean.

    At most 1; undefined (raises) for constant targets.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size < 2:
        raise ValueError("pred and target must be vectors of equal length >= 2")
    ss_tot = float(np.sum(np.square(target - target.mean())))
    if ss_tot == 0.0:
        raise ValueError("r_squared is undefined for a constant target")
    ss_res = float(np.sum(np.square(target - pred)))
    return 1.0 - ss_res / ss_tot


def anchor_delta(train_inputs) -> float:
    """The dynamic penalty anchor, ``2 * max|x|`` over the train inputs."""
    x = np.asarray(train_inputs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("anchor_delta needs at least one input")
    m = float(np.max(np.abs(x)))
    if m == 0.0:
        raise ValueError("degenerate anchor: all train inputs are zero")
    return 2.0 * m


def composite_fitness(expr: Expr, inputs, targets, config: FitnessConfig) -> float:
    """MSE plus the pull-to-zero penalty evaluated at ±delta.

    With ``config.delta=None`` the anchor is derived from ``inputs``; callers
    scoring a validation split must pass a config resolved on the train split.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    err = mse(evaluate(expr, inputs), targets)
    if config.gamma == 0.0:
        return err
    delta = config.resolve_delta(inputs)
    f_anchor = evaluate(expr, np.array([-delta, delta]))
    penalty = config.gamma * 0.5 * (f_anchor[0] ** 2 + f_anchor[1] ** 2)
    return float(err + penalty)
