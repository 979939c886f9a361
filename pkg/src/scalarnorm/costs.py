"""Exact FLOP and read-byte accounting for normalization methods.

Pricing convention: every multiplication, addition, subtraction, division,
floating-point round-to-integer, exponent-field add and square root counts as
one FLOP; ``clip`` costs zero (a compare plus a select on hardware with
conditional moves). Transcendentals decompose into a single unified ``exp``
primitive: range reduction ``x = k*ln2 + r`` (4 ops), a Horner-evaluated
Maclaurin truncation at the minimum degree meeting FP32 unit roundoff (2N ops,
N = 7 so 14), and a 2^k exponent-field reconstruction (1 op), totalling 19.
Sigmoid composes one negation, one exp, one add and one divide (22); tanh uses
``(e^{2x} - 1) / (e^{2x} + 1)`` for a single exp plus four algebraic ops (23).

The module also carries a reference scalar exp kernel implementing exactly the
priced operation sequence, so the 19-FLOP price is backed by a real algorithm
with an auditable op trace.
"""

from __future__ import annotations

import csv
import importlib.resources
import math
from dataclasses import dataclass
from pathlib import Path

from .expr import Add, Clip, Const, Expr, Mul, Neg, Sigmoid, Tanh, Var, iter_nodes, parse

__all__ = [
    "FP32_UNIT_ROUNDOFF",
    "EXP_HALFWIDTH",
    "CostConvention",
    "ModelShape",
    "LayerCost",
    "CostReport",
    "OpTrace",
    "horner_flops",
    "maclaurin_remainder_bound",
    "min_maclaurin_degree",
    "exp_flops",
    "tanh_flops",
    "sigmoid_flops",
    "expr_flops_per_scalar",
    "expr_flops_per_token",
    "layernorm_flops_per_token",
    "layernorm_flop_itemization",
    "dyt_flops_per_token",
    "memory_read_bytes_per_token",
    "aggregate_budget",
    "reference_exp",
    "builtin_expressions_path",
    "load_expression_csv",
]

FP32_UNIT_ROUNDOFF = 2.0 ** -24
EXP_HALFWIDTH = math.log(2.0) / 2.0

METHOD_LN = "ln"
METHOD_DYT = "dyt"
METHOD_GP = "gp"


def horner_flops(degree: int) -> int:
    """Nested evaluation of a degree-N polynomial: exactly N muls + N adds."""
    if degree < 0:
        raise ValueError("degree must be >= 0")
    return 2 * degree


def maclaurin_remainder_bound(halfwidth: float, degree: int) -> float:
    """Lagrange remainder of the exp Maclaurin truncation on |r| <= halfwidth:
    ``sqrt(2) * halfwidth^(N+1) / (N+1)!``. Valid for halfwidth <= ln2/2, where
    e^|r| <= sqrt(2)."""
    if not 0.0 <= halfwidth <= EXP_HALFWIDTH + 1e-15:
        raise ValueError(f"halfwidth {halfwidth} outside [0, ln2/2]")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    return math.sqrt(2.0) * halfwidth ** (degree + 1) / math.factorial(degree + 1)


def min_maclaurin_degree(halfwidth: float, tolerance: float) -> int:
    """Smallest truncation degree whose remainder bound is below ``tolerance``."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    n = 0
    while maclaurin_remainder_bound(halfwidth, n) >= tolerance:
        n += 1
    return n


@dataclass(frozen=True)
class CostConvention:
    """Per-primitive FLOP prices and the derived transcendental costs.

    Basic ops are all priced at one FLOP; ``clip`` at zero. The exp price is
    derived from the accuracy target (FP32 unit roundoff by default), so
    relaxing the tolerance propagates through tanh and sigmoid.
    """

    tolerance: float = FP32_UNIT_ROUNDOFF
    halfwidth: float = EXP_HALFWIDTH
    add: int = 1
    sub: int = 1
    mul: int = 1
    div: int = 1
    round_to_int: int = 1
    exponent_field_add: int = 1
    sqrt: int = 1
    neg: int = 1
    clip: int = 0

    @property
    def maclaurin_degree(self) -> int:
        return min_maclaurin_degree(self.halfwidth, self.tolerance)

    @property
    def range_reduction_flops(self) -> int:
        # x*log2(e), round, k*ln2, x - k*ln2
        return 2 * self.mul + self.round_to_int + self.sub

    @property
    def exp_flops(self) -> int:
        return self.range_reduction_flops + horner_flops(self.maclaurin_degree) \
            + self.exponent_field_add

    @property
    def sigmoid_flops(self) -> int:
        # -x, exp, 1 + (.), 1 / (.)
        return self.neg + self.exp_flops + self.add + self.div

    @property
    def tanh_flops(self) -> int:
        # 2x, exp, (.) - 1, (.) + 1, division
        return self.mul + self.exp_flops + self.sub + self.add + self.div


def exp_flops(convention: CostConvention | None = None) -> int:
    return (convention or CostConvention()).exp_flops


def tanh_flops(convention: CostConvention | None = None) -> int:
    return (convention or CostConvention()).tanh_flops


def sigmoid_flops(convention: CostConvention | None = None) -> int:
    return (convention or CostConvention()).sigmoid_flops


def expr_flops_per_scalar(expr: Expr, convention: CostConvention | None = None) -> int:
    """FLOPs for one scalar application of the tree: Add/Mul/Neg cost 1, tanh 23,
    sigmoid 22, clip 0, leaves 0."""
    conv = convention or CostConvention()
    total = 0
    for _, node in iter_nodes(expr):
        if isinstance(node, Add):
            total += conv.add
        elif isinstance(node, Mul):
            total += conv.mul
        elif isinstance(node, Neg):
            total += conv.neg
        elif isinstance(node, Tanh):
            total += conv.tanh_flops
        elif isinstance(node, Sigmoid):
            total += conv.sigmoid_flops
        elif isinstance(node, Clip):
            total += conv.clip
        elif not isinstance(node, (Var, Const)):
            raise TypeError(f"unknown node {node!r}")
    return total


def expr_flops_per_token(expr: Expr, d: int, convention: CostConvention | None = None) -> int:
    """Per-token cost of an element-wise replacement: d scalar applications."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return d * expr_flops_per_scalar(expr, convention)


def layernorm_flop_itemization(d: int, convention: CostConvention | None = None,
                               ) -> list[tuple[str, str, int]]:
    """Per-token LayerNorm cost, itemized step by step; rows sum to 5d+2."""
    if d < 1:
        raise ValueError("d must be >= 1")
    conv = convention or CostConvention()
    return [
        ("sum_i x_i", f"{d - 1} adds", (d - 1) * conv.add),
        ("mu = (.)/d", "1 div", conv.div),
        ("x'_i = x_i - mu", f"{d} subs", d * conv.sub),
        ("(x'_i)^2", f"{d} muls", d * conv.mul),
        ("sum_i (.)", f"{d - 1} adds", (d - 1) * conv.add),
        ("var = (.)/d", "1 div", conv.div),
        ("(.) + eps", "1 add", conv.add),
        ("sqrt(.)", "1 sqrt", conv.sqrt),
        ("x'_i / (.)", f"{d} divs", d * conv.div),
    ]


def layernorm_flops_per_token(d: int, convention: CostConvention | None = None) -> int:
    """Standard LayerNorm: 5d + 2 FLOPs per token (two reduction passes plus the
    per-element normalization; the shared affine transform is excluded)."""
    return sum(flops for _, _, flops in layernorm_flop_itemization(d, convention))


def dyt_flops_per_token(d: int, convention: CostConvention | None = None) -> int:
    """tanh(alpha*x) applied element-wise: d muls + d tanh evaluations = 24d."""
    if d < 1:
        raise ValueError("d must be >= 1")
    conv = convention or CostConvention()
    return d * (conv.mul + conv.tanh_flops)


def memory_read_bytes_per_token(method: str, d: int, bytes_per_element: int = 4) -> int:
    """Read traffic per token: LayerNorm's two reduction passes read the input
    twice (8d bytes in FP32); single-pass element-wise replacements read once."""
    if d < 1 or bytes_per_element < 1:
        raise ValueError("d and bytes_per_element must be >= 1")
    method = method.lower()
    if method == METHOD_LN:
        return 2 * bytes_per_element * d
    if method in (METHOD_DYT, METHOD_GP):
        return bytes_per_element * d
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class ModelShape:
    """Transformer dimensions the aggregate budgets are computed over
    (defaults: ViT-B with class token, FP32 activations)."""

    d: int = 768
    seq_len: int = 197
    n_layers: int = 25
    bytes_per_element: int = 4

    def __post_init__(self) -> None:
        if min(self.d, self.seq_len, self.n_layers, self.bytes_per_element) < 1:
            raise ValueError("all shape fields must be positive")


@dataclass(frozen=True)
class LayerCost:
    """Per-token FLOPs of one layer in ``coeff_d * d + const`` form."""

    layer_id: str
    expression: str | None
    coeff_d: int
    const: int

    def per_token(self, d: int) -> int:
        return self.coeff_d * d + self.const


@dataclass(frozen=True)
class CostReport:
    """Aggregate FLOP and read-byte budget for one method over a full forward pass."""

    method: str
    shape: ModelShape
    per_layer: tuple[LayerCost, ...]
    total_flops: int
    mflops: float
    read_bytes: int
    read_mb: float
    mb_convention: str
    write_traffic: str = "not applicable (output writes structurally identical across methods)"


def aggregate_budget(method: str, shape: ModelShape | None = None,
                     expressions: list[tuple[str, Expr]] | None = None,
                     convention: CostConvention | None = None,
                     mb_convention: str = "binary") -> CostReport:
    """Total FLOPs and read bytes for a forward pass: seq_len tokens through
    every normalization layer.

    ``gp`` requires exactly ``shape.n_layers`` (layer_id, expression) pairs;
    ``ln``/``dyt`` use their closed-form per-token costs. ``mb_convention``
    selects mebibytes ("binary", default) or 10^6-byte megabytes ("decimal").
    """
    shape = shape or ModelShape()
    conv = convention or CostConvention()
    method = method.lower()
    if method == METHOD_LN:
        layers = [LayerCost(f"layer{i + 1:02d}", None, 5, 2) for i in range(shape.n_layers)]
    elif method == METHOD_DYT:
        coeff = conv.mul + conv.tanh_flops
        layers = [LayerCost(f"layer{i + 1:02d}", "tanh(a*x)", coeff, 0)
                  for i in range(shape.n_layers)]
    elif method == METHOD_GP:
        if expressions is None or len(expressions) != shape.n_layers:
            got = 0 if expressions is None else len(expressions)
            raise ValueError(f"gp budget needs {shape.n_layers} expressions, got {got}")
        from .expr import format_expr

        layers = [LayerCost(layer_id, format_expr(e), expr_flops_per_scalar(e, conv), 0)
                  for layer_id, e in expressions]
    else:
        raise ValueError(f"unknown method {method!r}")

    per_token_total = sum(c.per_token(shape.d) for c in layers)
    total_flops = shape.seq_len * per_token_total
    per_token_read = memory_read_bytes_per_token(method, shape.d, shape.bytes_per_element)
    read_bytes = shape.n_layers * shape.seq_len * per_token_read
    if mb_convention == "binary":
        read_mb = read_bytes / 2**20
    elif mb_convention == "decimal":
        read_mb = read_bytes / 10**6
    else:
        raise ValueError("mb_convention must be 'binary' or 'decimal'")
    return CostReport(method=method, shape=shape, per_layer=tuple(layers),
                      total_flops=total_flops, mflops=total_flops / 1e6,
                      read_bytes=read_bytes, read_mb=read_mb,
                      mb_convention=mb_convention)


# --- reference exp kernel -------------------------------------------------------

@dataclass
class OpTrace:
    """Operation counter for auditing the reference kernel against the prices."""

    mul: int = 0
    add: int = 0
    sub: int = 0
    div: int = 0
    round_to_int: int = 0
    exponent_field_add: int = 0
    sqrt: int = 0

    @property
    def total(self) -> int:
        return (self.mul + self.add + self.sub + self.div + self.round_to_int
                + self.exponent_field_add + self.sqrt)


_LOG2E = 1.0 / math.log(2.0)
_LN2 = math.log(2.0)
# Maclaurin coefficients 1/k! for k = 7 .. 0, consumed by the Horner recurrence
_EXP_COEFFS = tuple(1.0 / math.factorial(k) for k in range(7, -1, -1))
EXP_ARG_LIMIT = 87.0


def reference_exp(x: float, trace: OpTrace | None = None) -> float:
    """exp(x) via the priced algorithm: range reduction, degree-7 Horner
    Maclaurin, exponent-field reconstruction. 19 operations per call.

    Valid on the FP32-representable range |x| <= 87; relative error stays below
    1e-5 (in practice ~1e-8) against a high-accuracy exponential.
    """
    if not -EXP_ARG_LIMIT <= x <= EXP_ARG_LIMIT:
        raise ValueError(f"reference_exp argument {x} outside [-87, 87]")
    # range reduction: x = k*ln2 + r with |r| <= ln2/2
    k = round(x * _LOG2E)             # 1 mul + 1 round-to-int
    r = x - k * _LN2                  # 1 mul + 1 sub
    # degree-7 Maclaurin via Horner: 7 muls + 7 adds
    p = _EXP_COEFFS[0]
    for c in _EXP_COEFFS[1:]:
        p = p * r + c
    # reconstruction: 2^k applied to the exponent field
    result = math.ldexp(p, k)         # 1 exponent-field add
    if trace is not None:
        trace.mul += 2 + 7
        trace.round_to_int += 1
        trace.sub += 1
        trace.add += 7
        trace.exponent_field_add += 1
    return result


# --- expression files -----------------------------------------------------------

def builtin_expressions_path() -> Path:
    """Bundled reference set: evolved replacement expressions for the 25
    normalization layers of ViT-B/16, one per layer."""
    return Path(importlib.resources.files("scalarnorm") / "expressions" / "vitb25.csv")


def load_expression_csv(path) -> list[tuple[str, Expr]]:
    """Read (layer_id, expression) pairs from a CSV with at least those two
    columns; selection/front files written by the search are accepted as-is."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"layer_id", "expression"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: need columns layer_id, expression")
        return [(row["layer_id"], parse(row["expression"])) for row in reader]
