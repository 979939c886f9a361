"""Exact reverse-mode gradients of the composite fitness w.r.t. tree constants,
plus the 10-step gradient refinement applied at every fitness evaluation.

Trees are compiled once into a postorder instruction list so refinement can
reuse a forward tape across steps. The instruction kernels are the same numpy
calls as :func:`scalarnorm.expr.evaluate`, so both paths produce bit-identical
values.

Local derivatives: tanh' = 1 - tanh^2, sigmoid' = s(1-s), neg' = -1, and
clip' = 1 inside [-bound, bound] (boundary inclusive), 0 outside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import MappingDataset
from .expr import (
    Add,
    Clip,
    Const,
    Expr,
    Mul,
    Neg,
    Sigmoid,
    Tanh,
    Var,
    with_constants,
)

__all__ = [
    "ConstGradientError",
    "Program",
    "compile_expr",
    "grad_constants",
    "refine_constants",
    "REFINE_STEPS_DEFAULT",
    "REFINE_STEP_SIZE_DEFAULT",
]

REFINE_STEPS_DEFAULT = 10
REFINE_STEP_SIZE_DEFAULT = 0.05
_MAX_HALVINGS = 4

_VAR, _CONST, _ADD, _MUL, _NEG, _TANH, _SIG, _CLIP = range(8)


class ConstGradientError(ValueError):
    """A constant's gradient came out non-finite; ``index`` is its preorder position."""

    def __init__(self, index: int):
        super().__init__(f"non-finite gradient for constant #{index}")
        self.index = index


@dataclass
class Program:
    """Postorder instruction list: (opcode, child slot a, child slot b, aux).

    ``aux`` is the constant's preorder index for CONST and the bound for CLIP.
    Instruction i writes slot i; the root is the last slot.
    """

    instrs: list[tuple[int, int, int, float]]
    init_consts: np.ndarray

    @property
    def n_consts(self) -> int:
        return int(self.init_consts.size)


def compile_expr(expr: Expr) -> Program:
    instrs: list[tuple[int, int, int, float]] = []
    consts: list[float] = []

    def emit(node: Expr) -> int:
        if isinstance(node, Var):
            instrs.append((_VAR, -1, -1, 0.0))
        elif isinstance(node, Const):
            instrs.append((_CONST, -1, -1, float(len(consts))))
            consts.append(node.value)
        elif isinstance(node, Add):
            a, b = emit(node.left), emit(node.right)
            instrs.append((_ADD, a, b, 0.0))
        elif isinstance(node, Mul):
            a, b = emit(node.left), emit(node.right)
            instrs.append((_MUL, a, b, 0.0))
        elif isinstance(node, Neg):
            a = emit(node.child)
            instrs.append((_NEG, a, -1, 0.0))
        elif isinstance(node, Tanh):
            a = emit(node.child)
            instrs.append((_TANH, a, -1, 0.0))
        elif isinstance(node, Sigmoid):
            a = emit(node.child)
            instrs.append((_SIG, a, -1, 0.0))
        elif isinstance(node, Clip):
            a = emit(node.child)
            instrs.append((_CLIP, a, -1, node.bound))
        else:
            raise TypeError(f"unknown node {node!r}")
        return len(instrs) - 1

    emit(expr)
    return Program(instrs, np.array(consts, dtype=np.float64))


def _forward(program: Program, x: np.ndarray, consts: np.ndarray) -> list:
    values: list = [None] * len(program.instrs)
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (op, a, b, aux) in enumerate(program.instrs):
            if op == _VAR:
                values[i] = x
            elif op == _CONST:
                values[i] = consts[int(aux)]
            elif op == _ADD:
                values[i] = values[a] + values[b]
            elif op == _MUL:
                values[i] = values[a] * values[b]
            elif op == _NEG:
                values[i] = -values[a]
            elif op == _TANH:
                values[i] = np.tanh(values[a])
            elif op == _SIG:
                values[i] = expit(values[a])
            else:
                values[i] = np.clip(values[a], -aux, aux)
    return values


def _prediction(values: list, x: np.ndarray) -> np.ndarray:
    root = values[-1]
    if np.ndim(root) == 0:
        return np.broadcast_to(np.float64(root), x.shape)
    return root


def _backward(program: Program, values: list, seed: np.ndarray) -> np.ndarray:
    """Propagate the output adjoint down the tape, summing into constant slots."""
    grads = np.zeros(program.n_consts)
    adjoints: list = [None] * len(program.instrs)
    adjoints[-1] = seed

    def acc(slot: int, delta) -> None:
        adjoints[slot] = delta if adjoints[slot] is None else adjoints[slot] + delta

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(program.instrs) - 1, -1, -1):
            adj = adjoints[i]
            if adj is None:
                continue
            op, a, b, aux = program.instrs[i]
            if op == _VAR:
                continue
            if op == _CONST:
                grads[int(aux)] += float(np.sum(adj))
            elif op == _ADD:
                acc(a, adj)
                acc(b, adj)
            elif op == _MUL:
                acc(a, adj * values[b])
                acc(b, adj * values[a])
            elif op == _NEG:
                acc(a, -adj)
            elif op == _TANH:
                acc(a, adj * (1.0 - np.square(values[i])))
            elif op == _SIG:
                acc(a, adj * values[i] * (1.0 - values[i]))
            else:  # _CLIP: pass-through inside the band, boundary inclusive
                acc(a, adj * (np.abs(values[a]) <= aux))
    return grads


def _loss_parts(pred: np.ndarray, targets: np.ndarray, gamma: float) -> float:
    n = targets.size
    with np.errstate(over="ignore", invalid="ignore"):
        err = float(np.mean(np.square(pred[:n] - targets)))
        penalty = gamma * 0.5 * (pred[n] ** 2 + pred[n + 1] ** 2)
        return float(err + penalty)


def _loss_seed(pred: np.ndarray, targets: np.ndarray, gamma: float) -> np.ndarray:
    n = targets.size
    seed = np.empty(n + 2)
    with np.errstate(over="ignore", invalid="ignore"):
        seed[:n] = 2.0 * (pred[:n] - targets) / n
        seed[n:] = gamma * pred[n:]
    return seed


def _augment(inputs: np.ndarray, delta: float) -> np.ndarray:
    return np.concatenate([inputs, (-delta, delta)])


def grad_constants(expr: Expr, inputs, targets, gamma: float, delta: float) -> np.ndarray:
    """Partial derivatives of the composite fitness w.r.t. each constant.

    Constants are ordered by preorder traversal (matching
    :func:`scalarnorm.expr.constants`). Raises :class:`ConstGradientError`
    if any entry comes out non-finite.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape or inputs.size == 0:
        raise ValueError("inputs and targets must be nonempty vectors of equal length")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not delta > 0:
        raise ValueError("delta must be positive")
    program = compile_expr(expr)
    if program.n_consts == 0:
        return np.empty(0)
    x_aug = _augment(inputs, delta)
    values = _forward(program, x_aug, program.init_consts)
    pred = _prediction(values, x_aug)
    grads = _backward(program, values, _loss_seed(pred, targets, gamma))
    bad = ~np.isfinite(grads)
    if bad.any():
        raise ConstGradientError(int(np.argmax(bad)))
    return grads


def refine_constants(expr: Expr, train: MappingDataset,
                     steps: int = REFINE_STEPS_DEFAULT,
                     step_size: float = REFINE_STEP_SIZE_DEFAULT,
                     *, gamma: float = 0.005, delta: float | None = None) -> Expr:
    """Gradient-descent refinement of the tree's constants on the train split.

    Plain descent with a fixed step plus per-step backtracking halving (at most
    4 halvings) when the composite loss would increase. A step that still fails
    after backtracking is rolled back and refinement halts. The returned tree
    has the same structure and never a worse composite fitness than the input
    (monotone-or-identity, enforced by a final comparison).
    """
    refined, _ = refine_constants_scored(expr, train.x, train.y, steps, step_size,
                                         gamma=gamma, delta=delta)
    return refined


def refine_constants_scored(expr: Expr, x, y, steps: int = REFINE_STEPS_DEFAULT,
                            step_size: float = REFINE_STEP_SIZE_DEFAULT,
                            *, gamma: float = 0.005, delta: float | None = None,
                            ) -> tuple[Expr, float]:
    """Like :func:`refine_constants` but also returns the final composite fitness
    on (x, y); used by the search loop, which needs both."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if delta is None:
        delta = 2.0 * float(np.max(np.abs(x)))
        if delta == 0.0:
            raise ValueError("degenerate anchor: all train inputs are zero")
    program = compile_expr(expr)
    x_aug = _augment(x, delta)

    def loss_of(consts: np.ndarray) -> tuple[float, list]:
        values = _forward(program, x_aug, consts)
        pred = _prediction(values, x_aug)
        return _loss_parts(pred, y, gamma), values

    consts = program.init_consts.copy()
    loss0, values = loss_of(consts)
    if program.n_consts == 0 or steps == 0 or not np.isfinite(loss0):
        return expr, loss0

    loss = loss0
    for _ in range(steps):
        pred = _prediction(values, x_aug)
        grads = _backward(program, values, _loss_seed(pred, y, gamma))
        if not np.all(np.isfinite(grads)):
            break
        if not np.any(grads):
            break
        size = step_size
        accepted = False
        for _ in range(_MAX_HALVINGS + 1):
            trial = consts - size * grads
            if np.all(np.isfinite(trial)):
                trial_loss, trial_values = loss_of(trial)
                if np.isfinite(trial_loss) and trial_loss <= loss:
                    consts, loss, values = trial, trial_loss, trial_values
                    accepted = True
                    break
            size *= 0.5
        if not accepted:
            break

    if loss <= loss0:
        return with_constants(expr, consts), loss
    return expr, loss0
