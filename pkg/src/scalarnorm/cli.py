"""Command-line surface: synth | evolve | fit-dyt | cost | report.

Every command is a deterministic function of its inputs, flags and seed, and
serializes the exact configuration it ran with into its output directory.
Defaults reproduce the full-scale search protocol (population 500, 50
generations, gamma 0.005, 20-node cap); ``--desk`` switches to the reduced
population-200/30-generation preset used by the acceptance suite.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .baselines import DytFit, compare_alignment, fit_dyt_alpha
from .costs import (
    CostConvention,
    ModelShape,
    aggregate_budget,
    layernorm_flop_itemization,
    load_expression_csv,
)
from .data import AffineParams, load_mappings, sample_and_split, save_mappings, synth_mappings
from .evolve import GpConfig, derive_rng, run_search
from .expr import parse
from .fitness import FitnessConfig

__all__ = ["main"]

_WORKERS_ENV = "SCALARNORM_WORKERS"
_STREAM_SYNTH = 101
_STREAM_SPLIT = 102

DESK_POPULATION = 200
DESK_GENERATIONS = 30


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(_WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _write_config(out_dir: Path, args: argparse.Namespace) -> None:
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {k: (str(v) if isinstance(v, Path) else v) for k, v in payload.items()}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _layer_profiles(profile: str, n_layers: int) -> list[str]:
    """Depth progression for a whole suite: ``mixed`` ramps from near-linear
    early layers through gently bent ones to S-shaped deep layers."""
    if profile != "mixed":
        return [profile] * n_layers
    n_linear = max(1, round(0.4 * n_layers))
    n_s = max(1, round(0.4 * n_layers))
    n_mid = max(0, n_layers - n_linear - n_s)
    return ["linear"] * n_linear + ["mixed"] * n_mid + ["s-shaped"] * n_s


def _layer_amplitudes(profiles: list[str], max_amplitude: float) -> list[float]:
    ramp = (0.6, 0.8, 1.0)
    amps, i = [], 0
    for prof in profiles:
        if prof == "linear":
            amps.append(max_amplitude)
        else:
            amps.append(round(max_amplitude * ramp[i % len(ramp)], 6))
            i += 1
    return amps


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profiles = _layer_profiles(args.profile, args.layers)
    amplitudes = _layer_amplitudes(profiles, args.amplitude)
    manifest = {"d": args.d, "n_tokens": args.n_tokens, "seed": args.seed,
                "profile": args.profile, "layers": []}
    for i, (prof, amp) in enumerate(zip(profiles, amplitudes), start=1):
        layer_id = f"layer{i:02d}"
        rng = derive_rng(args.seed, _STREAM_SYNTH, i)
        params = AffineParams(rng.uniform(0.7, 1.3, args.d), rng.normal(0.0, 0.1, args.d))
        ds = synth_mappings(prof, args.d, args.n_tokens, params, rng,
                            layer_id=layer_id, amplitude=amp)
        fname = f"{layer_id}.snmap"
        save_mappings(ds, out / fname)
        reloaded = load_mappings(out / fname)  # validates CRC and stats
        manifest["layers"].append({
            "layer_id": layer_id, "file": fname, "profile": prof, "amplitude": amp,
            "count": reloaded.count, "max_abs_x": reloaded.max_abs_x,
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_config(out, args)
    print(f"wrote {args.layers} mapping files to {out}")
    return 0


def _load_pools(data_dir: Path) -> dict[str, "object"]:
    """Mapping files from a synth or capture directory, keyed by the layer id
    each file carries (the manifest, when present, only locates the files)."""
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        paths = [data_dir / entry["file"] for entry in manifest["layers"]]
    else:
        paths = sorted(data_dir.glob("*.snmap"))
    if not paths:
        raise FileNotFoundError(f"no mapping files found in {data_dir}")
    pools = {}
    for path in paths:
        ds = load_mappings(path)
        if ds.layer_id in pools:
            raise ValueError(f"duplicate layer id {ds.layer_id!r} in {data_dir}")
        pools[ds.layer_id] = ds
    return pools


def _split_pools(pools, sample_n: int, train_fraction: float, split_seed: int):
    datasets = {}
    for layer_id in sorted(pools):
        pool = pools[layer_id]
        n = min(sample_n, pool.count)
        rng = derive_rng(split_seed, _STREAM_SPLIT, hash_layer(layer_id))
        datasets[layer_id] = sample_and_split(pool, n=n, train_fraction=train_fraction,
                                              rng=rng)
    return datasets


def hash_layer(layer_id: str) -> int:
    """Stable small integer for deriving per-layer RNG streams."""
    import zlib

    return zlib.crc32(layer_id.encode("utf-8"))


def _gp_config(args: argparse.Namespace) -> GpConfig:
    population = args.population_size
    generations = args.generations
    if args.desk:
        if population is None:
            population = DESK_POPULATION
        if generations is None:
            generations = DESK_GENERATIONS
    return GpConfig(
        population_size=population if population is not None else 500,
        generations=generations if generations is not None else 50,
        max_init_depth=args.max_init_depth,
        max_nodes=args.max_nodes,
        crossover_rate=args.crossover_rate,
        mutation_rate=args.mutation_rate,
        tournament_size=args.tournament_size,
        refinement_steps=args.refinement_steps,
        refinement_step_size=args.refinement_step_size,
        fitness_config=FitnessConfig(gamma=args.gamma),
        seed=0,
    )


def cmd_evolve(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pools = _load_pools(Path(args.data))
    datasets = _split_pools(pools, args.sample_n, args.train_fraction, args.split_seed)
    config = _gp_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    log = print if args.verbose else None
    result = run_search(datasets, config, seeds, out_dir=out, workers=args.workers, log=log)
    _write_config(out, args)
    report_mod.load_summary_json(out / "summary.json")  # revalidate what we wrote
    if result.failures:
        for failure in result.failures:
            print(f"FAILED {failure['layer_id']} seed={failure['seed']}: "
                  f"{failure['error']}", file=sys.stderr)
        return 1
    print(f"evolved {len(datasets)} layers x {len(seeds)} seeds -> {out}")
    return 0


def cmd_fit_dyt(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pools = _load_pools(Path(args.data))
    datasets = _split_pools(pools, args.sample_n, args.train_fraction, args.split_seed)
    rows = []
    for layer_id in sorted(datasets):
        train, _ = datasets[layer_id]
        fit = fit_dyt_alpha(train)
        rows.append((layer_id, fit.alpha, fit.mse, fit.r2))
    lines = ["layer_id,alpha,mse,r2"]
    lines += [f"{lid},{repr(float(a))},{repr(float(m))},{repr(float(r))}"
              for lid, a, m, r in rows]
    (out / "dyt.csv").write_text("\n".join(lines) + "\n")
    _write_config(out, args)
    if len(_load_dyt_csv(out / "dyt.csv")) != len(rows):  # revalidate what we wrote
        print("error: dyt.csv failed to round-trip", file=sys.stderr)
        return 1
    print(f"fit {len(rows)} layers -> {out / 'dyt.csv'}")
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    shape = ModelShape(d=args.d, seq_len=args.seq_len, n_layers=args.layers)
    convention = CostConvention()
    if args.expressions is not None:
        pairs = load_expression_csv(args.expressions)
        if len(pairs) != shape.n_layers:
            print(f"error: {args.expressions} has {len(pairs)} expressions, "
                  f"shape expects {shape.n_layers}", file=sys.stderr)
            return 1
        budget = aggregate_budget("gp", shape, expressions=pairs,
                                  convention=convention, mb_convention=args.mb_convention)
    else:
        budget = aggregate_budget(args.method, shape, convention=convention,
                                  mb_convention=args.mb_convention)
    ln_budget = aggregate_budget("ln", shape, mb_convention=args.mb_convention)
    doc = {
        "method": budget.method,
        "per_layer": [
            {"layer": c.layer_id, "expression": c.expression,
             "flops_per_token_coeff_d": c.coeff_d, "flops_per_token_const": c.const}
            for c in budget.per_layer
        ],
        "totals": {
            "mflops": budget.mflops,
            "read_mb": budget.read_mb,
            "ratio_vs_ln": budget.total_flops / ln_budget.total_flops,
        },
        "shape": dataclasses.asdict(shape),
        "mb_convention": budget.mb_convention,
        "write_traffic": budget.write_traffic,
        "config": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in vars(args).items() if k not in ("func", "out")},
    }
    if budget.method == "ln":
        doc["itemization_per_token"] = [
            {"step": step, "operations": ops, "flops": flops}
            for step, ops, flops in layernorm_flop_itemization(shape.d, convention)
        ]
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out is None:
        print(text, end="")
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    out = Path(args.out)
    summary_path = run_dir / "summary.json"
    dyt_path = Path(args.dyt) if args.dyt else run_dir / "dyt.csv"
    if not summary_path.exists():
        print(f"error: missing GP inputs: {summary_path} not found (run `evolve`)",
              file=sys.stderr)
        return 1
    if not dyt_path.exists():
        print(f"error: missing DyT inputs: {dyt_path} not found (run `fit-dyt`)",
              file=sys.stderr)
        return 1
    summary = report_mod.load_summary_json(summary_path)

    run_config = json.loads((run_dir / "config.json").read_text()) \
        if (run_dir / "config.json").exists() else {}
    data_dir = Path(args.data) if args.data else Path(run_config.get("data", ""))
    if not data_dir or not data_dir.exists():
        print("error: cannot locate the mapping data directory (pass --data)",
              file=sys.stderr)
        return 1
    pools = _load_pools(data_dir)
    datasets = _split_pools(pools,
                            int(run_config.get("sample_n", args.sample_n)),
                            float(run_config.get("train_fraction", args.train_fraction)),
                            int(run_config.get("split_seed", args.split_seed)))

    dyt_fits = _load_dyt_csv(dyt_path)
    missing = set(datasets) - set(dyt_fits)
    if missing:
        print(f"error: dyt.csv lacks layers {sorted(missing)}", file=sys.stderr)
        return 1
    # validation-split alignment for both methods
    gp_seed, gp_exprs = report_mod.representative_expressions(summary)
    gp_by_layer = {lid: parse(text) for lid, text in gp_exprs}
    val_sets = {lid: datasets[lid][1] for lid in datasets}
    rows = compare_alignment(gp_by_layer, dyt_fits, val_sets)
    dyt_mean_r2 = float(np.mean([r.dyt_r2 for r in rows]))

    summary.methods["ln"] = report_mod.MethodAlignment("ln", 1.0)
    summary.methods["dyt"] = report_mod.MethodAlignment("dyt", dyt_mean_r2)
    summary.methods["gp"] = report_mod.MethodAlignment("gp", summary.r2_mean,
                                                       expressions=tuple(gp_exprs))
    shape = ModelShape(d=args.d, seq_len=args.seq_len, n_layers=len(gp_exprs))
    tradeoff = report_mod.emit_tradeoff(summary, shape, mb_convention=args.mb_convention)

    out.mkdir(parents=True, exist_ok=True)
    report_mod.render_alignment_csv(summary.records, out / "alignment.csv")
    report_mod.render_tradeoff_csv(tradeoff, out / "tradeoff.csv")
    report_mod.render_report_json(summary, tradeoff, out / "report.json", shape,
                                  mb_convention=args.mb_convention)
    _write_config(out, args)
    # revalidate everything written: records round-trip and statistics recompute
    reread = report_mod.load_alignment_csv(out / "alignment.csv")
    report_mod.verify_summary(report_mod.summarize_alignment(reread))
    json.loads((out / "report.json").read_text())
    print(f"report (representative seed {gp_seed}) -> {out}")
    return 0


def _load_dyt_csv(path: Path) -> dict[str, DytFit]:
    import csv as _csv

    fits = {}
    with path.open(newline="") as fh:
        for row in _csv.DictReader(fh):
            fits[row["layer_id"]] = DytFit(alpha=float(row["alpha"]),
                                           mse=float(row["mse"]), r2=float(row["r2"]))
    return fits


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sample-n", type=int, default=50_000,
                   help="points sampled per layer before splitting (default 50000)")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--split-seed", type=int, default=1234,
                   help="seed of the sampling/splitting stream (shared by evolve and fit-dyt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalarnorm",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic per-layer mapping files")
    p.add_argument("--layers", type=int, default=25)
    p.add_argument("--profile", choices=["linear", "mixed", "s-shaped"], default="mixed")
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--n-tokens", type=int, default=100)
    p.add_argument("--amplitude", type=float, default=2.5,
                   help="largest saturation level across the suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evolve", help="run the multi-seed symbolic search")
    p.add_argument("--data", required=True, help="directory of mapping files")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated search seeds")
    p.add_argument("--population-size", type=int, default=None)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--gamma", type=float, default=0.005)
    p.add_argument("--max-nodes", type=int, default=20)
    p.add_argument("--max-init-depth", type=int, default=4)
    p.add_argument("--crossover-rate", type=float, default=0.8)
    p.add_argument("--mutation-rate", type=float, default=0.2)
    p.add_argument("--tournament-size", type=int, default=2)
    p.add_argument("--refinement-steps", type=int, default=10)
    p.add_argument("--refinement-step-size", type=float, default=0.05)
    p.add_argument("--desk", action="store_true",
                   help=f"desk preset: population {DESK_POPULATION}, "
                        f"{DESK_GENERATIONS} generations")
    p.add_argument("--workers", type=int, default=_default_workers(),
                   help=f"parallel evaluation workers (default ${_WORKERS_ENV} or 1)")
    p.add_argument("--verbose", action="store_true")
    _add_split_flags(p)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("fit-dyt", help="per-layer least-squares tanh(alpha*x) baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_split_flags(p)
    p.set_defaults(func=cmd_fit_dyt)

    p = sub.add_parser("cost", help="price expressions or a method under the FLOP model")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--expressions", help="CSV with layer_id,expression columns")
    group.add_argument("--method", choices=["ln", "dyt"])
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--seq-len", type=int, default=197)
    p.add_argument("--layers", type=int, default=25)
    p.add_argument("--mb-convention", choices=["binary", "decimal"], default="binary")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", help="assemble alignment and trade-off tables")
    p.add_argument("--run", required=True, help="directory with evolve + fit-dyt outputs")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="mapping data dir (default: from run config)")
    p.add_argument("--dyt", default=None, help="dyt.csv path (default: <run>/dyt.csv)")
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--seq-len", type=int, default=197)
    p.add_argument("--mb-convention", choices=["binary", "decimal"], default="binary")
    _add_split_flags(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
