"""Reverse-mode constant gradients against finite differences, and refinement."""

import numpy as np
import pytest

from scalarnorm.data import MappingDataset
from scalarnorm.expr import (
    Clip,
    Const,
    Mul,
    Tanh,
    Var,
    constants,
    format_expr,
    node_count,
    with_constants,
)
from scalarnorm.fitness import FitnessConfig, composite_fitness
from scalarnorm.gradients import (
    ConstGradientError,
    grad_constants,
    refine_constants,
)

from conftest import assert_grad_close, fd_gradient, random_tree


class TestGradConstants:
    def test_hand_case(self):
        # d/dc mean((c*x - y)^2) at c=1, (x,y)=(1,2): 2*(1-2)*1 = -2
        g = grad_constants(Mul(Const(1.0), Var()), [1.0], [2.0], 0.0, 1.0)
        assert g.tolist() == [-2.0]

    def test_no_constants_empty_gradient(self):
        g = grad_constants(Tanh(Var()), [1.0, 2.0], [0.5, 0.5], 0.005, 1.0)
        assert g.size == 0

    def test_zero_at_loss_minimum(self):
        g = grad_constants(Const(0.0), [1.0, -1.0], [0.0, 0.0], 0.0, 1.0)
        assert g.tolist() == [0.0]

    def test_penalty_term_contributes(self):
        # f = c*x, targets = c*x so MSE grad is 0, only the anchor term remains:
        # d/dc of gamma/2*((c*d)^2+(c*(-d))^2) = 2*gamma*c*delta^2
        x = np.array([0.5, -0.25])
        e = Mul(Const(2.0), Var())
        g = grad_constants(e, x, 2.0 * x, 0.01, 3.0)
        assert g[0] == pytest.approx(2 * 0.01 * 2.0 * 9.0, rel=1e-12)

    def test_clip_subgradient_boundary_inclusive(self):
        # child value exactly at the bound: derivative passes through
        e = Mul(Const(1.0), Clip(Var()))
        at_bound = grad_constants(e, [5.0], [0.0], 0.0, 1.0)
        assert at_bound[0] != 0.0
        outside = grad_constants(Clip(Mul(Const(1.0), Var())), [5.1], [0.0], 0.0, 1.0)
        assert outside[0] == 0.0

    def test_matches_finite_differences_randomized(self):
        gen = np.random.default_rng(11)
        checked = 0
        while checked < 150:
            tree = random_tree(gen, max_depth=4, const_range=1.5)
            if not constants(tree):
                continue
            x = gen.uniform(-1.5, 1.5, 40)
            from scalarnorm.expr import evaluate

            y = evaluate(tree, x) + gen.normal(0, 0.5, 40)
            gamma = 0.0 if checked % 2 == 0 else 0.005
            delta = 2.0 * float(np.max(np.abs(x)))
            rev = grad_constants(tree, x, y, gamma, delta)
            assert_grad_close(rev, fd_gradient(tree, x, y, gamma, delta))
            checked += 1

    def test_nonfinite_gradient_reports_index(self):
        e = Mul(Const(1e300), Mul(Const(1e300), Var()))
        with pytest.raises(ConstGradientError) as exc_info:
            grad_constants(e, [1.0], [0.0], 0.0, 1.0)
        assert exc_info.value.index in (0, 1)

    def test_validates_arguments(self):
        e = Mul(Const(1.0), Var())
        with pytest.raises(ValueError):
            grad_constants(e, [1.0], [1.0, 2.0], 0.0, 1.0)
        with pytest.raises(ValueError):
            grad_constants(e, [1.0], [1.0], -0.1, 1.0)
        with pytest.raises(ValueError):
            grad_constants(e, [1.0], [1.0], 0.0, 0.0)


def _dataset(x, y):
    return MappingDataset("t", np.asarray(x, float), np.asarray(y, float),
                          split_tag="train")


class TestRefineConstants:
    def test_converges_toward_least_squares_scale(self, rng):
        x = rng.uniform(-3, 3, 100)
        train = _dataset(x, 2.0 * x)
        refined = refine_constants(Mul(Const(1.5), Var()), train, gamma=0.0)
        c = constants(refined)[0]
        c_star = float(np.sum(x * (2.0 * x)) / np.sum(x * x))  # closed form = 2
        assert abs(c - c_star) < 0.2
        cfg = FitnessConfig(0.0, 2 * float(np.max(np.abs(x))))
        before = composite_fitness(Mul(Const(1.5), Var()), train.x, train.y, cfg)
        after = composite_fitness(refined, train.x, train.y, cfg)
        assert after < before

    def test_zero_steps_identity(self, rng):
        train = _dataset(rng.normal(size=10), rng.normal(size=10))
        e = Mul(Const(1.5), Var())
        assert refine_constants(e, train, steps=0) is e

    def test_no_constants_identity(self, rng):
        train = _dataset(rng.normal(size=10), rng.normal(size=10))
        assert refine_constants(Tanh(Var()), train) == Tanh(Var())

    def test_structure_preserved_on_random_trees(self, rng):
        x = rng.uniform(-2, 2, 60)
        train = _dataset(x, np.tanh(x))
        for _ in range(50):
            tree = random_tree(rng, max_depth=4)
            refined = refine_constants(tree, train)
            assert node_count(refined) == node_count(tree)
            assert type(refined) is type(tree)
            stripped = lambda e: format_expr(with_constants(e, [0.0] * len(constants(e))))
            assert stripped(refined) == stripped(tree)

    def test_monotone_or_identity(self, rng):
        x = rng.uniform(-2, 2, 80)
        y = 1.7 * np.tanh(1.2 * x)
        train = _dataset(x, y)
        cfg = FitnessConfig(0.005, 2 * float(np.max(np.abs(x))))
        for _ in range(60):
            tree = random_tree(rng, max_depth=4)
            refined = refine_constants(tree, train, gamma=cfg.gamma, delta=cfg.delta)
            before = composite_fitness(tree, x, y, cfg)
            after = composite_fitness(refined, x, y, cfg)
            assert after <= before or refined == tree

    def test_rejects_bad_arguments(self, rng):
        train = _dataset([1.0], [1.0])
        e = Mul(Const(1.0), Var())
        with pytest.raises(ValueError):
            refine_constants(e, train, steps=-1)
        with pytest.raises(ValueError):
            refine_constants(e, train, step_size=0.0)
