"""Homogeneous tanh(alpha*x) baseline with a per-layer least-squares alpha.

The single scale parameter is fit by 1-D minimization of the squared error: a
64-point coarse scan over the search interval brackets the minimum (the
objective need not be unimodal on pathological data), then golden-section
search refines it to tolerance. Because tanh(alpha*x) is bounded to (-1, 1),
the baseline structurally under-fits any mapping whose amplitude exceeds 1,
which is what the per-layer comparison quantifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import MappingDataset
from .expr import Expr, evaluate
from .fitness import mse, r_squared

__all__ = ["DytFit", "fit_dyt_alpha", "dyt_eval", "compare_alignment", "AlignmentRow"]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class DytFit:
    """Fitted scale and the alignment metrics on the dataset it was fit to."""

    alpha: float
    mse: float
    r2: float


def dyt_eval(alpha: float, inputs) -> np.ndarray:
    """Element-wise tanh(alpha * x)."""
    return np.tanh(alpha * np.asarray(inputs, dtype=np.float64))


def _objective(alpha: float, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.square(np.tanh(alpha * x) - y)))


def fit_dyt_alpha(data: MappingDataset, search_interval: tuple[float, float] = (0.0, 32.0),
                  tol: float = 1e-6) -> DytFit:
    """Least-squares alpha over ``search_interval``, within ``tol`` of the
    interval minimizer. Alpha is restricted to be nonnegative (a negative scale
    only mirrors a sign flip)."""
    lo, hi = search_interval
    if not (0.0 <= lo < hi):
        raise ValueError("search interval must satisfy 0 <= lo < hi")
    x, y = data.x, data.y

    grid = np.linspace(lo, hi, 64)
    scores = [_objective(a, x, y) for a in grid]
    best = int(np.argmin(scores))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]

    # golden-section on [a, b]; degenerates gracefully when the argmin sits on
    # an interval boundary (the bracket is then one grid cell wide)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = _objective(c, x, y), _objective(d, x, y)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = _objective(c, x, y)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = _objective(d, x, y)
    alpha = float((a + b) / 2.0)
    pred = dyt_eval(alpha, x)
    try:
        r2 = r_squared(pred, y)
    except ValueError:  # constant targets: R^2 undefined, alpha still meaningful
        r2 = float("nan")
    return DytFit(alpha=alpha, mse=mse(pred, y), r2=r2)


@dataclass(frozen=True)
class AlignmentRow:
    layer_id: str
    gp_mse: float
    gp_r2: float
    dyt_mse: float
    dyt_r2: float


def compare_alignment(gp_selected: dict[str, Expr], dyt_fits: dict[str, DytFit],
                      datasets: dict[str, MappingDataset]) -> list[AlignmentRow]:
    """Head-to-head per-layer metrics for both methods on the given datasets
    (one row per layer, layers sorted by id). Layer sets must match."""
    if set(gp_selected) != set(datasets) or set(dyt_fits) != set(datasets):
        raise ValueError("gp_selected, dyt_fits and datasets must cover the same layers")
    rows = []
    for layer_id in sorted(datasets):
        ds = datasets[layer_id]
        gp_pred = evaluate(gp_selected[layer_id], ds.x)
        dyt_pred = dyt_eval(dyt_fits[layer_id].alpha, ds.x)
        rows.append(AlignmentRow(
            layer_id=layer_id,
            gp_mse=mse(gp_pred, ds.y), gp_r2=r_squared(gp_pred, ds.y),
            dyt_mse=mse(dyt_pred, ds.y), dyt_r2=r_squared(dyt_pred, ds.y),
        ))
    return rows
