"""Layer-specific scalar replacements for LayerNorm: symbolic search, the
homogeneous tanh(alpha*x) baseline, and exact FLOP/memory cost accounting."""

from .baselines import DytFit, compare_alignment, dyt_eval, fit_dyt_alpha
from .costs import (
    CostConvention,
    CostReport,
    ModelShape,
    aggregate_budget,
    builtin_expressions_path,
    dyt_flops_per_token,
    expr_flops_per_scalar,
    expr_flops_per_token,
    layernorm_flops_per_token,
    load_expression_csv,
    memory_read_bytes_per_token,
    reference_exp,
)
from .data import (
    AffineParams,
    MappingDataset,
    layernorm_forward,
    load_mappings,
    pre_affine_invert,
    sample_and_split,
    save_mappings,
    synth_mappings,
)
from .evolve import (
    GpConfig,
    Individual,
    ParetoFront,
    evolve_layer,
    run_search,
    select_best,
)
from .expr import Expr, evaluate, format_expr, node_count, parse
from .fitness import FitnessConfig, anchor_delta, composite_fitness, mse, r_squared
from .gradients import grad_constants, refine_constants

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "CostConvention",
    "CostReport",
    "DytFit",
    "Expr",
    "FitnessConfig",
    "GpConfig",
    "Individual",
    "MappingDataset",
    "ModelShape",
    "ParetoFront",
    "aggregate_budget",
    "anchor_delta",
    "builtin_expressions_path",
    "compare_alignment",
    "composite_fitness",
    "dyt_eval",
    "dyt_flops_per_token",
    "evaluate",
    "evolve_layer",
    "expr_flops_per_scalar",
    "expr_flops_per_token",
    "fit_dyt_alpha",
    "format_expr",
    "grad_constants",
    "layernorm_flops_per_token",
    "layernorm_forward",
    "load_expression_csv",
    "load_mappings",
    "memory_read_bytes_per_token",
    "mse",
    "node_count",
    "parse",
    "pre_affine_invert",
    "r_squared",
    "reference_exp",
    "refine_constants",
    "run_search",
    "sample_and_split",
    "save_mappings",
    "select_best",
    "synth_mappings",
]
