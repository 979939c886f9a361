"""Multi-objective genetic programming over (composite fitness, node count).

One evolutionary search per normalization layer: ramped half-and-half
initialization (depths 2..4), subtree crossover plus mixed mutation, constant
refinement at every evaluation, and NSGA-II environmental selection with a
(mu + lambda) pool. The final first front is archived with validation scores.

Determinism contract: every result is a pure function of (datasets, config,
seed). Variation draws from per-(generation, pair) RNG streams derived from the
seed, and evaluation (refinement included) is RNG-free, so parallelizing
evaluation across workers cannot change any result.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

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
    evaluate,
    format_expr,
    iter_nodes,
    node_count,
    replace_subtree,
    subtree_at,
)
from .fitness import FitnessConfig, composite_fitness, mse, r_squared
from .gradients import refine_constants_scored

__all__ = [
    "GpConfig",
    "Individual",
    "ParetoFront",
    "init_population",
    "dominates",
    "nondominated_sort",
    "crowding_distance",
    "crossover",
    "mutate",
    "evolve_layer",
    "select_best",
    "run_search",
    "RunResult",
    "derive_rng",
]

_CONST_RANGE = 3.0
_GROW_LEAF_PROB = 0.25
_VAR_LEAF_PROB = 0.5
_MUTATION_DEPTH = 3

_STREAM_INIT = 1
_STREAM_VARIATION = 2


@dataclass(frozen=True)
class GpConfig:
    """Search knobs. Defaults are the full-scale protocol (population 500 over
    50 generations, depth-4 initial trees, 20-node complexity cap, 10-step
    constant refinement per evaluation)."""

    population_size: int = 500
    generations: int = 50
    max_init_depth: int = 4
    max_nodes: int = 20
    crossover_rate: float = 0.8
    mutation_rate: float = 0.2
    tournament_size: int = 2
    refinement_steps: int = 10
    refinement_step_size: float = 0.05
    fitness_config: FitnessConfig = field(default_factory=FitnessConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.max_nodes < 3:
            raise ValueError("max_nodes must be >= 3")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")


@dataclass
class Individual:
    """An expression with its objective pair and NSGA-II bookkeeping.

    ``fitness`` is the composite training fitness (+inf until evaluated),
    ``complexity`` the node count. Validation metrics are filled when the
    individual is archived on a Pareto front.
    """

    expr: Expr
    fitness: float = math.inf
    complexity: int = 0
    rank: int = 0
    crowding: float = 0.0
    fitness_val: float | None = None
    mse_val: float | None = None
    r2_val: float | None = None

    def __post_init__(self) -> None:
        if self.complexity == 0:
            self.complexity = node_count(self.expr)

    @property
    def objectives(self) -> tuple[float, int]:
        return (self.fitness, self.complexity)


@dataclass
class ParetoFront:
    """Final mutually non-dominated archive of one (layer, seed) search, with
    duplicate canonical expressions removed."""

    individuals: list[Individual]
    layer_id: str
    seed: int


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Named RNG stream: independent generators for (seed, purpose, ...) keys."""
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, *tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# --- tree generation ------------------------------------------------------------

_UNARY = (Neg, Tanh, Sigmoid, Clip)
_BINARY = (Add, Mul)
_FUNCTIONS = _BINARY + _UNARY


def _random_terminal(rng: np.random.Generator) -> Expr:
    if rng.random() < _VAR_LEAF_PROB:
        return Var()
    return Const(rng.uniform(-_CONST_RANGE, _CONST_RANGE))


def _random_tree(rng: np.random.Generator, depth_budget: int, full: bool) -> Expr:
    if depth_budget <= 1 or (not full and rng.random() < _GROW_LEAF_PROB):
        return _random_terminal(rng)
    ctor = _FUNCTIONS[rng.integers(len(_FUNCTIONS))]
    if ctor in _BINARY:
        return ctor(_random_tree(rng, depth_budget - 1, full),
                    _random_tree(rng, depth_budget - 1, full))
    return ctor(_random_tree(rng, depth_budget - 1, full))


def init_population(config: GpConfig, rng: np.random.Generator) -> list[Individual]:
    """Ramped half-and-half over depths 2..max_init_depth, alternating grow and
    full; constants are uniform on ±3. Trees over the node cap are redrawn.
    Returned individuals are unevaluated (fitness +inf)."""
    depths = list(range(2, max(config.max_init_depth, 2) + 1))
    population = []
    for i in range(config.population_size):
        depth_budget = depths[i % len(depths)]
        full = (i // len(depths)) % 2 == 0
        while True:
            tree = _random_tree(rng, depth_budget, full)
            if node_count(tree) <= config.max_nodes:
                break
        population.append(Individual(tree))
    return population


# --- dominance machinery ---------------------------------------------------------

def dominates(a: Individual, b: Individual) -> bool:
    """True iff ``a`` is no worse than ``b`` in both objectives and strictly
    better in at least one (both minimized)."""
    if a.fitness > b.fitness or a.complexity > b.complexity:
        return False
    return a.fitness < b.fitness or a.complexity < b.complexity


def nondominated_sort(population: list[Individual]) -> list[list[Individual]]:
    """Fast non-dominated sorting; assigns ``rank`` and returns the fronts in
    order. Vectorized pairwise dominance, identical to the O(n^2) definition."""
    n = len(population)
    if n == 0:
        return []
    f = np.array([ind.fitness for ind in population])
    c = np.array([ind.complexity for ind in population], dtype=np.float64)
    no_worse = (f[:, None] <= f[None, :]) & (c[:, None] <= c[None, :])
    better = (f[:, None] < f[None, :]) | (c[:, None] < c[None, :])
    dom = no_worse & better  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts: list[list[Individual]] = []
    rank = 0
    remaining = counts >= 0  # all true
    while remaining.any():
        current = remaining & (counts == 0)
        if not current.any():  # pragma: no cover - defensive; dominance is acyclic
            raise RuntimeError("dominance cycle")
        idx = np.flatnonzero(current)
        for i in idx:
            population[i].rank = rank
        fronts.append([population[i] for i in idx])
        counts = counts - dom[idx].sum(axis=0)
        remaining &= ~current
        counts[~remaining] = -1
        rank += 1
    return fronts


def crowding_distance(front: list[Individual]) -> list[float]:
    """NSGA-II crowding: boundary individuals of each objective get +inf,
    interior ones the normalized cuboid-side sum. Assigns ``crowding``."""
    n = len(front)
    if n == 0:
        return []
    dists = np.zeros(n)
    if n <= 2:
        dists[:] = math.inf
    else:
        for values in ([ind.fitness for ind in front],
                       [float(ind.complexity) for ind in front]):
            vals = np.array(values)
            order = np.argsort(vals, kind="stable")
            dists[order[0]] = math.inf
            dists[order[-1]] = math.inf
            span = vals[order[-1]] - vals[order[0]]
            # a constant objective contributes nothing; an infinite one (broken
            # tree sharing a front) would poison interior distances with nan
            if span == 0.0 or not math.isfinite(span):
                continue
            dists[order[1:-1]] += (vals[order[2:]] - vals[order[:-2]]) / span
    for ind, d in zip(front, dists):
        ind.crowding = float(d)
    return [float(d) for d in dists]


# --- variation --------------------------------------------------------------------

def _cut_paths(expr: Expr) -> list[tuple[int, ...]]:
    return [path for path, _ in iter_nodes(expr) if path]


def crossover(a: Expr, b: Expr, rng: np.random.Generator,
              config: GpConfig) -> tuple[Expr, Expr]:
    """Subtree exchange at random non-root cut points. Parents without internal
    cut points come back unchanged, and any offspring over the node cap is
    replaced by its base parent (size-fair fallback)."""
    paths_a, paths_b = _cut_paths(a), _cut_paths(b)
    if not paths_a or not paths_b:
        return a, b
    pa = paths_a[rng.integers(len(paths_a))]
    pb = paths_b[rng.integers(len(paths_b))]
    sub_a, sub_b = subtree_at(a, pa), subtree_at(b, pb)
    child_a = replace_subtree(a, pa, sub_b)
    child_b = replace_subtree(b, pb, sub_a)
    if node_count(child_a) > config.max_nodes:
        child_a = a
    if node_count(child_b) > config.max_nodes:
        child_b = b
    return child_a, child_b


def _point_replacement(node: Expr, rng: np.random.Generator) -> Expr:
    if isinstance(node, Add):
        return Mul(node.left, node.right)
    if isinstance(node, Mul):
        return Add(node.left, node.right)
    if isinstance(node, _UNARY):
        choices = [k for k in _UNARY if not isinstance(node, k)]
        ctor = choices[rng.integers(len(choices))]
        child = node.child
        return ctor(child)
    if isinstance(node, Var):
        return Const(rng.uniform(-_CONST_RANGE, _CONST_RANGE))
    return Var()  # Const


def mutate(expr: Expr, rng: np.random.Generator, config: GpConfig) -> Expr:
    """With probability ``mutation_rate``, apply one of subtree replacement,
    point mutation, or constant jitter (chosen uniformly). Oversize results
    fall back to the parent, so the node cap is never violated."""
    if rng.random() >= config.mutation_rate:
        return expr
    kind = int(rng.integers(3))
    nodes = list(iter_nodes(expr))
    if kind == 0:  # subtree replacement (root included)
        path = nodes[rng.integers(len(nodes))][0]
        donor = _random_tree(rng, _MUTATION_DEPTH, full=False)
        child = replace_subtree(expr, path, donor)
    elif kind == 1:  # point mutation
        path, node = nodes[rng.integers(len(nodes))]
        child = replace_subtree(expr, path, _point_replacement(node, rng))
    else:  # constant jitter
        const_paths = [path for path, node in nodes if isinstance(node, Const)]
        if not const_paths:
            return expr
        path = const_paths[rng.integers(len(const_paths))]
        value = subtree_at(expr, path).value
        jittered = value + rng.normal(0.0, 0.25 * (1.0 + abs(value)))
        child = replace_subtree(expr, path, Const(jittered))
    if node_count(child) > config.max_nodes:
        return expr
    return child


# --- evaluation --------------------------------------------------------------------

_EVAL_CTX: dict | None = None


def _set_eval_ctx(ctx: dict) -> None:
    global _EVAL_CTX
    _EVAL_CTX = ctx


def _evaluate_expr(expr: Expr) -> tuple[Expr, float]:
    """Refine constants on the train split and return (refined tree, fitness).
    Non-finite fitness maps to +inf so broken trees are dominated away."""
    ctx = _EVAL_CTX
    refined, loss = refine_constants_scored(
        expr, ctx["x"], ctx["y"], ctx["steps"], ctx["step_size"],
        gamma=ctx["gamma"], delta=ctx["delta"])
    if not math.isfinite(loss):
        return refined, math.inf
    return refined, loss


def _evaluate_into(population: list[Individual], cache: dict,
                   pool: ProcessPoolExecutor | None, workers: int) -> None:
    pending: list[tuple[int, str]] = []
    for i, ind in enumerate(population):
        if math.isfinite(ind.fitness):
            continue
        key = format_expr(ind.expr)
        hit = cache.get(key)
        if hit is None:
            pending.append((i, key))
        else:
            ind.expr, ind.fitness = hit
    if not pending:
        return
    exprs = [population[i].expr for i, _ in pending]
    if pool is None:
        results = [_evaluate_expr(e) for e in exprs]
    else:
        chunk = max(1, len(exprs) // (4 * workers))
        results = list(pool.map(_evaluate_expr, exprs, chunksize=chunk))
    for (i, key), (refined, fitness) in zip(pending, results):
        population[i].expr = refined
        population[i].fitness = fitness
        cache[key] = (refined, fitness)


def _environmental_selection(pool: list[Individual], mu: int) -> list[Individual]:
    survivors: list[Individual] = []
    for front in nondominated_sort(pool):
        crowding_distance(front)
        if len(survivors) + len(front) <= mu:
            survivors.extend(front)
        else:
            room = mu - len(survivors)
            order = sorted(range(len(front)), key=lambda i: -front[i].crowding)
            survivors.extend(front[i] for i in order[:room])
            break
    return survivors


def _tournament(population: list[Individual], rng: np.random.Generator,
                k: int) -> Individual:
    contestants = rng.integers(0, len(population), size=k)
    best = min(contestants,
               key=lambda i: (population[i].rank, -population[i].crowding, int(i)))
    return population[best]


def evolve_layer(train: MappingDataset, val: MappingDataset, config: GpConfig,
                 workers: int = 1, observer=None) -> ParetoFront:
    """Run one full search and return the final first front, re-scored on the
    validation split (same gamma and the anchor frozen from the train split).

    ``observer(generation, population)`` is called after every environmental
    selection (generation 0 = the evaluated initial population).
    """
    if train.layer_id != val.layer_id:
        raise ValueError("train and validation splits belong to different layers")
    fit_cfg = config.fitness_config.resolved(train.x)
    ctx = {
        "x": train.x, "y": train.y, "gamma": fit_cfg.gamma, "delta": fit_cfg.delta,
        "steps": config.refinement_steps, "step_size": config.refinement_step_size,
    }
    _set_eval_ctx(ctx)
    cache: dict[str, tuple[Expr, float]] = {}

    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(
            max_workers=workers,
            mp_context=multiprocessing.get_context("fork"),
            initializer=_set_eval_ctx, initargs=(ctx,))
    try:
        population = init_population(config, derive_rng(config.seed, _STREAM_INIT))
        _evaluate_into(population, cache, pool, workers)
        population = _environmental_selection(population, config.population_size)
        if observer is not None:
            observer(0, population)

        for gen in range(1, config.generations + 1):
            offspring: list[Individual] = []
            pair = 0
            while len(offspring) < config.population_size:
                rng = derive_rng(config.seed, _STREAM_VARIATION, gen, pair)
                pair += 1
                p1 = _tournament(population, rng, config.tournament_size)
                p2 = _tournament(population, rng, config.tournament_size)
                if rng.random() < config.crossover_rate:
                    c1, c2 = crossover(p1.expr, p2.expr, rng, config)
                else:
                    c1, c2 = p1.expr, p2.expr
                for child in (c1, c2):
                    if len(offspring) < config.population_size:
                        offspring.append(Individual(mutate(child, rng, config)))
            _evaluate_into(offspring, cache, pool, workers)
            population = _environmental_selection(population + offspring,
                                                  config.population_size)
            if observer is not None:
                observer(gen, population)
    finally:
        if pool is not None:
            pool.shutdown()

    front = [ind for ind in nondominated_sort(population)[0]
             if math.isfinite(ind.fitness)]
    if not front:
        raise RuntimeError(f"{train.layer_id}: no finite-fitness individual survived")
    front.sort(key=lambda ind: (ind.fitness, ind.complexity, format_expr(ind.expr)))
    seen: set[str] = set()
    archived: list[Individual] = []
    for ind in front:
        key = format_expr(ind.expr)
        if key not in seen:
            seen.add(key)
            archived.append(ind)
    for ind in archived:
        try:
            ind.fitness_val = composite_fitness(ind.expr, val.x, val.y, fit_cfg)
            pred = evaluate(ind.expr, val.x)
            ind.mse_val = mse(pred, val.y)
            ind.r2_val = r_squared(pred, val.y)
        except ValueError:
            ind.fitness_val = math.inf
    return ParetoFront(archived, layer_id=train.layer_id, seed=config.seed)


def select_best(front: ParetoFront, val: MappingDataset | None = None,
                fitness_config: FitnessConfig | None = None) -> Individual:
    """The archived individual with the lowest validation fitness; ties break
    to fewer nodes, then to the lexicographically smaller canonical string.

    Fronts from :func:`evolve_layer` already carry validation scores; passing
    ``val`` plus a resolved ``fitness_config`` rescores explicitly.
    """
    if not front.individuals:
        raise ValueError("empty Pareto front")
    individuals = front.individuals
    if val is not None:
        if fitness_config is None or fitness_config.delta is None:
            raise ValueError("rescoring needs a fitness config with a frozen delta")
        for ind in individuals:
            ind.fitness_val = composite_fitness(ind.expr, val.x, val.y, fitness_config)
    if any(ind.fitness_val is None for ind in individuals):
        raise ValueError("front has no validation scores; pass val to rescore")
    return min(individuals,
               key=lambda ind: (ind.fitness_val, ind.complexity, format_expr(ind.expr)))


# --- multi-seed protocol -------------------------------------------------------------

@dataclass
class RunResult:
    """Everything a multi-seed search produced: one selected individual and one
    archived front per (layer, seed), failures, and the run summary."""

    selections: dict[tuple[str, int], Individual]
    fronts: dict[tuple[str, int], ParetoFront]
    failures: list[dict]
    summary: "object"  # report.RunSummary; typed loosely to avoid a cycle


def run_search(datasets: dict[str, tuple[MappingDataset, MappingDataset]],
               config: GpConfig, seeds: list[int], out_dir=None,
               workers: int = 1, log=None) -> RunResult:
    """Independent searches for every (layer, seed) combination.

    Per-search failures are recorded and the run continues. With ``out_dir``
    set, front CSVs, the selection CSV and the summary JSON are persisted in
    the documented formats.
    """
    from . import report as report_mod

    if not datasets:
        raise ValueError("no datasets supplied")
    selections: dict[tuple[str, int], Individual] = {}
    fronts: dict[tuple[str, int], ParetoFront] = {}
    failures: list[dict] = []
    records: list[report_mod.SelectionRecord] = []
    for layer_id in sorted(datasets):
        train, val = datasets[layer_id]
        for seed in seeds:
            try:
                front = evolve_layer(train, val, replace(config, seed=seed),
                                     workers=workers)
                best = select_best(front)
                record = report_mod.selection_record(layer_id, seed, best)
            except Exception as exc:  # per-search isolation, run continues
                failures.append({"layer_id": layer_id, "seed": seed, "error": str(exc)})
                continue
            selections[(layer_id, seed)] = best
            fronts[(layer_id, seed)] = front
            records.append(record)
            if log is not None:
                log(f"{layer_id} seed={seed}: {format_expr(best.expr)} "
                    f"(val fitness {best.fitness_val:.4g})")
    summary = report_mod.summarize_alignment(records) if records else None
    result = RunResult(selections, fronts, failures, summary)
    if out_dir is not None:
        report_mod.persist_run(result, out_dir)
    return result
