"""Shared helpers: independent oracles and random-tree generation for tests."""

import numpy as np
import pytest

from scalarnorm.expr import (
    Add,
    Clip,
    Const,
    Mul,
    Neg,
    Sigmoid,
    Tanh,
    Var,
    children,
)


def random_tree(rng, max_depth, const_range=3.0, p_leaf=0.3):
    """Independent random tree generator for round-trip and gradient tests."""
    if max_depth <= 1 or rng.random() < p_leaf:
        if rng.random() < 0.5:
            return Var()
        return Const(float(rng.uniform(-const_range, const_range)))
    kind = rng.integers(6)
    if kind == 0:
        return Add(random_tree(rng, max_depth - 1, const_range),
                   random_tree(rng, max_depth - 1, const_range))
    if kind == 1:
        return Mul(random_tree(rng, max_depth - 1, const_range),
                   random_tree(rng, max_depth - 1, const_range))
    if kind == 2:
        return Neg(random_tree(rng, max_depth - 1, const_range))
    if kind == 3:
        return Tanh(random_tree(rng, max_depth - 1, const_range))
    if kind == 4:
        return Sigmoid(random_tree(rng, max_depth - 1, const_range))
    return Clip(random_tree(rng, max_depth - 1, const_range))


def count_nodes_reference(expr):
    """Plain recursive node counter, independent of the library implementation."""
    return 1 + sum(count_nodes_reference(k) for k in children(expr))


def depth_reference(expr):
    kids = children(expr)
    if not kids:
        return 1
    return 1 + max(depth_reference(k) for k in kids)


def brute_force_fronts(objectives):
    """O(n^2) dominance-counting front partition over (fitness, complexity)
    pairs, written from the definition; returns a list of index sets."""

    def dom(a, b):
        return (a[0] <= b[0] and a[1] <= b[1]) and (a[0] < b[0] or a[1] < b[1])

    n = len(objectives)
    dominators = [set() for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j and dom(objectives[j], objectives[i]):
                dominators[i].add(j)
    remaining = set(range(n))
    fronts = []
    while remaining:
        front = {i for i in remaining if not (dominators[i] & remaining)}
        fronts.append(front)
        remaining -= front
    return fronts


FD_STEP = 1e-6


def fd_gradient(expr, x, y, gamma, delta):
    """Central finite differences of the composite fitness, step 1e-6."""
    import numpy as _np

    from scalarnorm.expr import constants, with_constants
    from scalarnorm.fitness import FitnessConfig, composite_fitness

    cfg = FitnessConfig(gamma, delta)
    base = constants(expr)
    out = []
    for i in range(len(base)):
        up, down = list(base), list(base)
        up[i] += FD_STEP
        down[i] -= FD_STEP
        hi = composite_fitness(with_constants(expr, up), x, y, cfg)
        lo = composite_fitness(with_constants(expr, down), x, y, cfg)
        out.append((hi - lo) / (2 * FD_STEP))
    return _np.array(out)


def assert_grad_close(rev, fd):
    """Relative tolerance 1e-5 with a 1e-8 absolute floor near zero."""
    for r, f in zip(rev, fd):
        tol = max(1e-5 * max(abs(r), abs(f)), 1e-8)
        assert abs(r - f) <= tol, f"rev={r} fd={f}"


def fit_line_r2(x, y):
    """Least-squares line oracle."""
    a = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    pred = a @ coef
    return 1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)


def fit_scaled_tanh_r2(x, y, b_grid=None):
    """Two-parameter a*tanh(b*x) grid-search oracle (a closed-form per b)."""
    if b_grid is None:
        b_grid = np.linspace(0.05, 4.0, 120)
    best = -np.inf
    for b in b_grid:
        t = np.tanh(b * x)
        denom = np.sum(t * t)
        if denom == 0.0:
            continue
        a = np.sum(t * y) / denom
        r2 = 1.0 - np.sum((y - a * t) ** 2) / np.sum((y - y.mean()) ** 2)
        best = max(best, r2)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(20240 + 17)
