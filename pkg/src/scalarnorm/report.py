"""Run summaries: per-(layer, seed) selection records, cross-seed statistics,
and the method-level compute/memory trade-off table.

Statistics protocol: within each seed, MSE and R^2 are averaged over layers;
the reported numbers are the mean and sample standard deviation (n-1
denominator; 0 for a single seed) of those per-seed means across seeds.

Frozen CSV column orders:
  alignment: layer_id, seed, expression, fitness_train, fitness_val, mse_val,
             r2_val, node_count
  trade-off: method, mflops, read_mb, mean_r2
"""

from __future__ import annotations

import csv
import importlib.resources
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .costs import (
    CostConvention,
    ModelShape,
    aggregate_budget,
    expr_flops_per_scalar,
)
from .expr import format_expr, parse

__all__ = [
    "SelectionRecord",
    "MethodAlignment",
    "RunSummary",
    "TradeoffRow",
    "selection_record",
    "summarize_alignment",
    "verify_summary",
    "representative_expressions",
    "emit_tradeoff",
    "render_alignment_csv",
    "render_tradeoff_csv",
    "render_report_json",
    "persist_run",
    "load_summary_json",
    "report_schema_path",
    "ALIGNMENT_COLUMNS",
    "TRADEOFF_COLUMNS",
]

ALIGNMENT_COLUMNS = ("layer_id", "seed", "expression", "fitness_train",
                     "fitness_val", "mse_val", "r2_val", "node_count")
TRADEOFF_COLUMNS = ("method", "mflops", "read_mb", "mean_r2")

ACCURACY_AXIS_NOTE = ("alignment R^2 substituted for classification accuracy; "
                      "this artifact measures functional alignment only")


@dataclass(frozen=True)
class SelectionRecord:
    """One selected expression: the validation-best individual of one search."""

    layer_id: str
    seed: int
    expression: str
    fitness_train: float
    fitness_val: float
    mse_val: float
    r2_val: float
    node_count: int
    flops_coeff: int


@dataclass(frozen=True)
class MethodAlignment:
    """Mean alignment of one method, plus its per-layer expressions for costing
    (GP only; LN and DyT have closed-form costs)."""

    method: str
    mean_r2: float
    expressions: tuple[tuple[str, str], ...] | None = None


@dataclass
class RunSummary:
    """Selection records with cross-seed statistics and, once attached, the
    per-method alignment entries the trade-off table needs."""

    records: list[SelectionRecord]
    mse_mean: float
    mse_std: float
    r2_mean: float
    r2_std: float
    per_seed_mse: dict[int, float]
    per_seed_r2: dict[int, float]
    methods: dict[str, MethodAlignment] = field(default_factory=dict)


@dataclass(frozen=True)
class TradeoffRow:
    method: str
    mflops: float
    read_mb: float
    mean_r2: float


def selection_record(layer_id: str, seed: int, individual) -> SelectionRecord:
    """Build the record for a selected individual (validation scores must be set)."""
    if None in (individual.fitness_val, individual.mse_val, individual.r2_val):
        raise ValueError("individual carries no validation scores")
    return SelectionRecord(
        layer_id=layer_id, seed=seed,
        expression=format_expr(individual.expr),
        fitness_train=float(individual.fitness),
        fitness_val=float(individual.fitness_val),
        mse_val=float(individual.mse_val),
        r2_val=float(individual.r2_val),
        node_count=int(individual.complexity),
        flops_coeff=expr_flops_per_scalar(individual.expr, CostConvention()),
    )


def _cross_seed(values_by_seed: dict[int, float]) -> tuple[float, float]:
    vals = np.array([values_by_seed[s] for s in sorted(values_by_seed)])
    mean = float(vals.mean())
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return mean, std


def summarize_alignment(records: list[SelectionRecord]) -> RunSummary:
    """Per-seed layer means, then cross-seed mean ± sample std of MSE and R^2."""
    if not records:
        raise ValueError("no records to summarize")
    seeds = sorted({r.seed for r in records})
    per_seed_mse, per_seed_r2 = {}, {}
    for seed in seeds:
        rows = [r for r in records if r.seed == seed]
        per_seed_mse[seed] = float(np.mean([r.mse_val for r in rows]))
        per_seed_r2[seed] = float(np.mean([r.r2_val for r in rows]))
    mse_mean, mse_std = _cross_seed(per_seed_mse)
    r2_mean, r2_std = _cross_seed(per_seed_r2)
    return RunSummary(records=list(records), mse_mean=mse_mean, mse_std=mse_std,
                      r2_mean=r2_mean, r2_std=r2_std,
                      per_seed_mse=per_seed_mse, per_seed_r2=per_seed_r2)


def verify_summary(summary: RunSummary, tol: float = 1e-12) -> None:
    """Recompute every derived statistic from the raw records and assert
    agreement; raises ValueError on any drift."""
    fresh = summarize_alignment(summary.records)
    for name in ("mse_mean", "mse_std", "r2_mean", "r2_std"):
        a, b = getattr(summary, name), getattr(fresh, name)
        if not math.isclose(a, b, rel_tol=0.0, abs_tol=tol):
            raise ValueError(f"summary field {name} not recomputable: {a} vs {b}")
    for seed in fresh.per_seed_mse:
        if abs(summary.per_seed_mse[seed] - fresh.per_seed_mse[seed]) > tol:
            raise ValueError(f"per-seed MSE for seed {seed} not recomputable")
        if abs(summary.per_seed_r2[seed] - fresh.per_seed_r2[seed]) > tol:
            raise ValueError(f"per-seed R2 for seed {seed} not recomputable")


def representative_expressions(summary: RunSummary) -> tuple[int, list[tuple[str, str]]]:
    """The per-layer expressions of the representative seed (lowest layer-mean
    validation fitness), used to price the GP cost row."""
    by_seed: dict[int, list[SelectionRecord]] = {}
    for rec in summary.records:
        by_seed.setdefault(rec.seed, []).append(rec)
    seed = min(by_seed, key=lambda s: (float(np.mean([r.fitness_val for r in by_seed[s]])), s))
    rows = sorted(by_seed[seed], key=lambda r: r.layer_id)
    return seed, [(r.layer_id, r.expression) for r in rows]


def emit_tradeoff(summary: RunSummary, shape: ModelShape | None = None,
                  mb_convention: str = "binary") -> list[TradeoffRow]:
    """One (method, total MFLOPs, read MB, mean R^2) row for LN, DyT and GP.

    Requires all three method entries on the summary (the GP entry carrying its
    per-layer expressions); raises naming the absent method otherwise.
    """
    shape = shape or ModelShape()
    rows = []
    for method in ("ln", "dyt", "gp"):
        entry = summary.methods.get(method)
        if entry is None:
            raise ValueError(f"summary is missing the {method.upper()} method entry")
        if method == "gp":
            if not entry.expressions:
                raise ValueError("GP method entry carries no expressions")
            exprs = [(lid, parse(text)) for lid, text in entry.expressions]
            budget = aggregate_budget("gp", shape, expressions=exprs,
                                      mb_convention=mb_convention)
        else:
            budget = aggregate_budget(method, shape, mb_convention=mb_convention)
        rows.append(TradeoffRow(method=method, mflops=budget.mflops,
                                read_mb=budget.read_mb, mean_r2=entry.mean_r2))
    return rows


# --- serialization ----------------------------------------------------------------

def _fmt_cell(value) -> str:
    if isinstance(value, float):  # np.float64 included; cast for a clean repr
        return repr(float(value))
    return str(value)


def render_alignment_csv(records: list[SelectionRecord], path) -> None:
    """Selection records in the frozen column order, sorted by (layer, seed)."""
    rows = sorted(records, key=lambda r: (r.layer_id, r.seed))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ALIGNMENT_COLUMNS)
        for r in rows:
            writer.writerow([_fmt_cell(getattr(r, col)) for col in ALIGNMENT_COLUMNS])


def load_alignment_csv(path) -> list[SelectionRecord]:
    records = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(SelectionRecord(
                layer_id=row["layer_id"], seed=int(row["seed"]),
                expression=row["expression"],
                fitness_train=float(row["fitness_train"]),
                fitness_val=float(row["fitness_val"]),
                mse_val=float(row["mse_val"]), r2_val=float(row["r2_val"]),
                node_count=int(row["node_count"]),
                flops_coeff=expr_flops_per_scalar(parse(row["expression"]),
                                                  CostConvention()),
            ))
    return records


def render_tradeoff_csv(rows: list[TradeoffRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRADEOFF_COLUMNS)
        for r in rows:
            writer.writerow([_fmt_cell(getattr(r, col)) for col in TRADEOFF_COLUMNS])


def summary_to_json_obj(summary: RunSummary) -> dict:
    return {
        "records": [asdict(r) for r in sorted(summary.records,
                                              key=lambda r: (r.layer_id, r.seed))],
        "aggregate": {
            "mse_mean": summary.mse_mean, "mse_std": summary.mse_std,
            "r2_mean": summary.r2_mean, "r2_std": summary.r2_std,
            "per_seed_mse": {str(k): v for k, v in sorted(summary.per_seed_mse.items())},
            "per_seed_r2": {str(k): v for k, v in sorted(summary.per_seed_r2.items())},
        },
    }


def render_report_json(summary: RunSummary, tradeoff: list[TradeoffRow], path,
                       shape: ModelShape | None = None,
                       mb_convention: str = "binary") -> dict:
    """The combined report document (alignment + trade-off); deterministic bytes
    for a fixed summary. Returns the document that was written."""
    shape = shape or ModelShape()
    doc = {
        "alignment": summary_to_json_obj(summary),
        "tradeoff": [asdict(r) for r in tradeoff],
        "shape": {"d": shape.d, "seq_len": shape.seq_len, "n_layers": shape.n_layers,
                  "bytes_per_element": shape.bytes_per_element},
        "mb_convention": mb_convention,
        "accuracy_axis": ACCURACY_AXIS_NOTE,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def report_schema_path() -> Path:
    return Path(importlib.resources.files("scalarnorm") / "schemas" / "report.schema.json")


# --- run persistence ---------------------------------------------------------------

def _front_filename(layer_id: str, seed: int) -> str:
    return f"{layer_id.replace('/', '_')}__seed{seed}.csv"


def persist_run(result, out_dir) -> None:
    """Write front CSVs, selection.csv and summary.json for a finished run."""
    out = Path(out_dir)
    fronts_dir = out / "fronts"
    fronts_dir.mkdir(parents=True, exist_ok=True)
    for (layer_id, seed), front in sorted(result.fronts.items()):
        with (fronts_dir / _front_filename(layer_id, seed)).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ALIGNMENT_COLUMNS)
            for ind in front.individuals:
                writer.writerow([
                    layer_id, seed, format_expr(ind.expr),
                    _fmt_cell(float(ind.fitness)), _fmt_cell(float(ind.fitness_val)),
                    _fmt_cell(float("nan") if ind.mse_val is None else float(ind.mse_val)),
                    _fmt_cell(float("nan") if ind.r2_val is None else float(ind.r2_val)),
                    ind.complexity,
                ])
    records = [selection_record(lid, seed, ind)
               for (lid, seed), ind in sorted(result.selections.items())]
    render_alignment_csv(records, out / "selection.csv")
    obj = summary_to_json_obj(result.summary) if result.summary is not None else {}
    obj["failures"] = result.failures
    (out / "summary.json").write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_summary_json(path) -> RunSummary:
    """Rebuild a RunSummary from a persisted summary.json."""
    obj = json.loads(Path(path).read_text())
    records = [SelectionRecord(**rec) for rec in obj["records"]]
    summary = summarize_alignment(records)
    verify_summary(summary)
    agg = obj["aggregate"]
    for name in ("mse_mean", "mse_std", "r2_mean", "r2_std"):
        if not math.isclose(agg[name], getattr(summary, name), rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"stored aggregate {name} inconsistent with records")
    return summary
