"""Scalar expression trees over the closed operator set {+, *, neg, tanh, sigmoid, clip}.

An expression is an immutable tree with a single input variable ``x``. Trees are
the unit of evolution, evaluation and FLOP costing. This module owns the tree
types, element-wise evaluation, the infix grammar (parse/format round-trip
losslessly), and the structural metrics (node count, depth).

Grammar (whitespace ignored)::

    expr    := term (("+" | "-") term)*
    term    := unary ("*" unary)*
    unary   := "-" unary | primary          # "-" NUMBER folds into the constant
    primary := NUMBER | "x" | NAME "(" expr ["," NUMBER] ")" | "(" expr ")"
    NAME    := "tanh" | "sigmoid" | "clip"  # only clip takes the optional bound

Binary minus is sugar: ``a - b`` parses as ``a + (-b)``, with the sign folded
into ``b`` when it is a numeric literal. ``format`` emits only ``+`` and ``*``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "Expr",
    "Var",
    "Const",
    "Add",
    "Mul",
    "Neg",
    "Tanh",
    "Sigmoid",
    "Clip",
    "EvaluationError",
    "ParseError",
    "evaluate",
    "parse",
    "format_expr",
    "node_count",
    "depth",
    "children",
    "iter_nodes",
    "constants",
    "with_constants",
    "subtree_at",
    "replace_subtree",
    "DEFAULT_CLIP_BOUND",
]

DEFAULT_CLIP_BOUND = 5.0


class Expr:
    """Base class for expression nodes. Instances are immutable and shareable."""

    __slots__ = ()


@dataclass(frozen=True)
class Var(Expr):
    """The single input variable ``x``."""


@dataclass(frozen=True)
class Const(Expr):
    """A finite real constant."""

    value: float

    def __post_init__(self) -> None:
        v = float(self.value)
        if not math.isfinite(v):
            raise ValueError(f"constant must be finite, got {self.value!r}")
        object.__setattr__(self, "value", v)


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Neg(Expr):
    child: Expr


@dataclass(frozen=True)
class Tanh(Expr):
    child: Expr


@dataclass(frozen=True)
class Sigmoid(Expr):
    child: Expr


@dataclass(frozen=True)
class Clip(Expr):
    """Symmetric value clipping to ±bound. The bound is a node parameter, not an
    evolvable constant; it defaults to 5.0 and evolution never mutates it."""

    child: Expr
    bound: float = DEFAULT_CLIP_BOUND

    def __post_init__(self) -> None:
        b = float(self.bound)
        if not (math.isfinite(b) and b > 0):
            raise ValueError(f"clip bound must be finite and positive, got {self.bound!r}")
        object.__setattr__(self, "bound", b)


class EvaluationError(ValueError):
    """A non-finite value appeared while evaluating an expression.

    ``path`` locates the offending node as a tuple of child indices from the
    root (left/only child = 0, right child = 1).
    """

    def __init__(self, message: str, path: tuple[int, ...]):
        super().__init__(f"{message} at node path {path}")
        self.path = path


class ParseError(ValueError):
    """Malformed expression text; ``position`` is a character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


def children(expr: Expr) -> tuple[Expr, ...]:
    if isinstance(expr, (Add, Mul)):
        return (expr.left, expr.right)
    if isinstance(expr, (Neg, Tanh, Sigmoid, Clip)):
        return (expr.child,)
    return ()


def iter_nodes(expr: Expr):
    """Yield (path, node) pairs in preorder (parent first, children left to right)."""
    stack = [((), expr)]
    while stack:
        path, node = stack.pop()
        yield path, node
        kids = children(node)
        for i in range(len(kids) - 1, -1, -1):
            stack.append((path + (i,), kids[i]))


def node_count(expr: Expr) -> int:
    """Total number of nodes, leaves included."""
    return sum(1 for _ in iter_nodes(expr))


def depth(expr: Expr) -> int:
    """Tree depth; a lone leaf has depth 1."""
    kids = children(expr)
    if not kids:
        return 1
    return 1 + max(depth(k) for k in kids)


def constants(expr: Expr) -> list[float]:
    """Constant values in preorder. Clip bounds are parameters, not constants."""
    return [node.value for _, node in iter_nodes(expr) if isinstance(node, Const)]


def with_constants(expr: Expr, values) -> Expr:
    """Rebuild the tree with constants replaced in preorder. Structure is unchanged."""
    values = list(values)
    n = sum(1 for _, node in iter_nodes(expr) if isinstance(node, Const))
    if len(values) != n:
        raise ValueError(f"expected {n} constants, got {len(values)}")
    it = iter(values)

    def rebuild(node: Expr) -> Expr:
        if isinstance(node, Const):
            return Const(next(it))
        if isinstance(node, Var):
            return node
        if isinstance(node, Add):
            return Add(rebuild(node.left), rebuild(node.right))
        if isinstance(node, Mul):
            return Mul(rebuild(node.left), rebuild(node.right))
        if isinstance(node, Neg):
            return Neg(rebuild(node.child))
        if isinstance(node, Tanh):
            return Tanh(rebuild(node.child))
        if isinstance(node, Sigmoid):
            return Sigmoid(rebuild(node.child))
        if isinstance(node, Clip):
            return Clip(rebuild(node.child), node.bound)
        raise TypeError(f"unknown node {node!r}")

    return rebuild(expr)


def subtree_at(expr: Expr, path: tuple[int, ...]) -> Expr:
    node = expr
    for i in path:
        node = children(node)[i]
    return node


def replace_subtree(expr: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    """Return a copy of ``expr`` with the subtree at ``path`` replaced by ``new``.
    Unaffected subtrees are shared, which is safe because nodes are immutable."""
    if not path:
        return new
    i, rest = path[0], path[1:]
    if isinstance(expr, Add):
        return Add(replace_subtree(expr.left, rest, new) if i == 0 else expr.left,
                   replace_subtree(expr.right, rest, new) if i == 1 else expr.right)
    if isinstance(expr, Mul):
        return Mul(replace_subtree(expr.left, rest, new) if i == 0 else expr.left,
                   replace_subtree(expr.right, rest, new) if i == 1 else expr.right)
    if isinstance(expr, Neg):
        return Neg(replace_subtree(expr.child, rest, new))
    if isinstance(expr, Tanh):
        return Tanh(replace_subtree(expr.child, rest, new))
    if isinstance(expr, Sigmoid):
        return Sigmoid(replace_subtree(expr.child, rest, new))
    if isinstance(expr, Clip):
        return Clip(replace_subtree(expr.child, rest, new), expr.bound)
    raise IndexError(f"path {path} does not exist in a leaf node")


# --- evaluation ---------------------------------------------------------------

def apply_node(node: Expr, child_values):
    """One node's numeric kernel. Shared by the checked evaluator here and the
    compiled fast path in ``gradients``, so both produce bit-identical results."""
    if isinstance(node, Add):
        return child_values[0] + child_values[1]
    if isinstance(node, Mul):
        return child_values[0] * child_values[1]
    if isinstance(node, Neg):
        return -child_values[0]
    if isinstance(node, Tanh):
        return np.tanh(child_values[0])
    if isinstance(node, Sigmoid):
        return expit(child_values[0])
    if isinstance(node, Clip):
        return np.clip(child_values[0], -node.bound, node.bound)
    raise TypeError(f"apply_node called on leaf {node!r}")


def evaluate(expr: Expr, inputs) -> np.ndarray:
    """Element-wise evaluation of the tree over a vector of inputs.

    All arithmetic is 64-bit. Every intermediate is checked for finiteness;
    the first non-finite value raises :class:`EvaluationError` carrying the
    offending node's path. Output length always equals input length.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 1:
        x = x.ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")

    def rec(node: Expr, path: tuple[int, ...]):
        if isinstance(node, Var):
            return x
        if isinstance(node, Const):
            return node.value
        vals = [rec(k, path + (i,)) for i, k in enumerate(children(node))]
        with np.errstate(over="ignore", invalid="ignore"):
            out = apply_node(node, vals)
        if not np.all(np.isfinite(out)):
            raise EvaluationError("non-finite value", path)
        return out

    result = rec(expr, ())
    return np.broadcast_to(np.float64(result), x.shape).copy() if np.ndim(result) == 0 else result


# --- parsing ------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*(),]))"
)

_FUNCTIONS = {"tanh": Tanh, "sigmoid": Sigmoid, "clip": Clip}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos].isspace():
                pos += 1
                continue
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                raise ParseError(f"unexpected character {text[pos]!r}", pos)
            if m.lastgroup is not None:
                self.tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("end", "", len(self.text))

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}, found {val or 'end of input'!r}", pos)

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.parse_term() if val == "+" else self._negate_term(self.parse_term())
                node = Add(node, rhs)
            else:
                return node

    def parse_term(self) -> Expr:
        node = self.parse_unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "*":
                self.next()
                node = Mul(node, self.parse_unary())
            else:
                return node

    def parse_unary(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            nk, nv, _ = self.peek()
            if nk == "num":  # "-1.5" is the constant -1.5, not Neg(Const(1.5))
                self.next()
                return Const(-self._float(nv))
            return Neg(self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Expr:
        kind, val, pos = self.next()
        if kind == "num":
            return Const(self._float(val))
        if kind == "name":
            if val == "x":
                return Var()
            ctor = _FUNCTIONS.get(val)
            if ctor is None:
                raise ParseError(f"unknown identifier {val!r}", pos)
            self.expect_op("(")
            arg = self.parse_expr()
            k, v, p = self.peek()
            if k == "op" and v == ",":
                if ctor is not Clip:
                    raise ParseError(f"{val} takes a single argument", p)
                self.next()
                bk, bv, bp = self.next()
                sign = 1.0
                if bk == "op" and bv == "-":
                    sign = -1.0
                    bk, bv, bp = self.next()
                if bk != "num":
                    raise ParseError("clip bound must be a numeric literal", bp)
                self.expect_op(")")
                return Clip(arg, sign * self._float(bv))
            self.expect_op(")")
            return ctor(arg)
        if kind == "op" and val == "(":
            inner = self.parse_expr()
            self.expect_op(")")
            return inner
        raise ParseError(f"unexpected {val or 'end of input'!r}", pos)

    @staticmethod
    def _negate_term(node: Expr) -> Expr:
        # binary-minus sugar: fold the sign into the term's leading constant
        # factor when there is one ("a - 0.5*x" -> Add(a, Mul(-0.5, x)))
        if isinstance(node, Const):
            return Const(-node.value)
        if isinstance(node, Mul):
            return Mul(_Parser._negate_term(node.left), node.right)
        return Neg(node)

    @staticmethod
    def _float(text: str) -> float:
        try:
            return float(text)
        except ValueError as exc:  # pragma: no cover - regex should preclude this
            raise ParseError(f"malformed constant {text!r}", 0) from exc


def parse(text: str) -> Expr:
    """Parse an infix expression string into a tree.

    Raises :class:`ParseError` (with a character position) on malformed input
    or unknown identifiers.
    """
    p = _Parser(text)
    node = p.parse_expr()
    kind, val, pos = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected trailing input {val!r}", pos)
    return node


# --- formatting ---------------------------------------------------------------

def format_expr(expr: Expr) -> str:
    """Canonical string form; ``parse(format_expr(e))`` reproduces ``e`` exactly.

    Constants print with ``repr`` (shortest decimal that round-trips the float).
    ``+`` and ``*`` print left-associated; right-nested operands of the same
    precedence are parenthesized so the tree shape survives the round trip.
    """
    if isinstance(expr, Var):
        return "x"
    if isinstance(expr, Const):
        # negative constants are valid wherever an operand may start ("x*-2.0"),
        # because every operand position accepts a leading unary minus
        return repr(expr.value)
    if isinstance(expr, Add):
        left = format_expr(expr.left)
        right = format_expr(expr.right)
        if isinstance(expr.right, Add):
            right = f"({right})"
        return f"{left} + {right}"
    if isinstance(expr, Mul):
        left = format_expr(expr.left)
        right = format_expr(expr.right)
        if isinstance(expr.left, Add):
            left = f"({left})"
        if isinstance(expr.right, (Add, Mul)):
            right = f"({right})"
        return f"{left}*{right}"
    if isinstance(expr, Neg):
        # parenthesize so "-(1.5)" stays a Neg node instead of folding to -1.5
        return f"-({format_expr(expr.child)})"
    if isinstance(expr, Tanh):
        return f"tanh({format_expr(expr.child)})"
    if isinstance(expr, Sigmoid):
        return f"sigmoid({format_expr(expr.child)})"
    if isinstance(expr, Clip):
        inner = format_expr(expr.child)
        if expr.bound == DEFAULT_CLIP_BOUND:
            return f"clip({inner})"
        return f"clip({inner}, {repr(expr.bound)})"
    raise TypeError(f"unknown node {expr!r}")
