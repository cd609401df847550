"""Command-line pipeline: fit ensembles, sample, solve, report.

Four subcommands cover the batch workflow.  ``fit`` calibrates the layer
ensembles and stores them as a reusable bundle; ``run`` samples topologies,
solves each trial and writes edge lists, solutions and diagnostics;
``compare`` is ``run --compare``, which additionally benchmarks the three
reconstruction methods against each other; ``metrics`` emits plot-ready
degree, neighbor-degree, budget and flow tables for one trial.

All outputs are deterministic functions of the configuration, including the
seed, and carry the configuration hash in their directory name.  Exit codes:
0 on success, 1 for configuration errors, 2 for data errors, 3 when solving
failed or any trial did not converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SOLVERS, RunConfig, load_config
from .ensembles import LAYER_ORDER, MODEL_TYPES, LayerKind, layer_from_dict
from .errors import (ConfigError, DataError, FitError, InfeasibleError,
                     SolverError)
from .ingest import AgentRegistry, FitnessSet
from .metrics import (COMPARED_METHODS, PreparedRun, aggregate_report, annd,
                      budgets, degree_stats, flow_vs_degree, prepare_models,
                      sample_trial_system, write_report)
from .solvers import (FlowSolution, SolverDiagnostics, dcgm_weights,
                      diagnostics, solve_bayes, solve_least_norm, solve_nnls)
from .system import LinearSystem, MultilayerTopology

logger = logging.getLogger(__name__)

BUNDLE_FILES = ("fitnesses.json", "registry.json", "layers.json")


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as configuration errors.

    The stock parser exits with status 2, which this tool reserves for data
    errors, so bad flags are rerouted through the normal error path instead.
    """

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def _json_value(value: float) -> float | None:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _dump_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def bundle_dir(config: RunConfig) -> Path:
    return Path(config.out_dir) / f"bundle_seed{config.seed}_{config.model_hash()}"


def run_dir(config: RunConfig) -> Path:
    return Path(config.out_dir) / f"run_seed{config.seed}_{config.config_hash()}"


def write_bundle(prepared: PreparedRun, config: RunConfig) -> Path:
    """Store fitted ensembles, fitnesses and the registry under ``out_dir``."""
    target = bundle_dir(config)
    target.mkdir(parents=True, exist_ok=True)
    fit = prepared.fitnesses
    _dump_json(target / "fitnesses.json", {
        "sectors": list(prepared.registry.sectors),
        "dyad": fit.dyad.tolist(),
        "x_cons": fit.x_cons.tolist(),
        "x_wage": fit.x_wage.tolist(),
        "a": fit.a.tolist(),
    })
    reg = prepared.registry
    _dump_json(target / "registry.json", {
        "nb": reg.nb, "nf": reg.nf, "nh": reg.nh,
        "sectors": list(reg.sectors),
        "firm_sector": reg.firm_sector.tolist(),
        "household_sector": reg.household_sector.tolist(),
    })
    _dump_json(target / "layers.json", {
        kind.value: prepared.models[kind].to_dict() for kind in LAYER_ORDER})
    return target


def load_bundle(config: RunConfig) -> PreparedRun:
    """Restore a stored bundle; probabilities are rebuilt from the stored z."""
    source = bundle_dir(config)
    with open(source / "fitnesses.json") as fh:
        raw_fit = json.load(fh)
    with open(source / "registry.json") as fh:
        raw_reg = json.load(fh)
    with open(source / "layers.json") as fh:
        raw_layers = json.load(fh)
    fitnesses = FitnessSet(dyad=np.asarray(raw_fit["dyad"], dtype=float),
                           x_cons=np.asarray(raw_fit["x_cons"], dtype=float),
                           x_wage=np.asarray(raw_fit["x_wage"], dtype=float),
                           a=np.asarray(raw_fit["a"], dtype=float))
    registry = AgentRegistry(
        nb=int(raw_reg["nb"]), nf=int(raw_reg["nf"]), nh=int(raw_reg["nh"]),
        sectors=tuple(raw_reg["sectors"]),
        firm_sector=np.asarray(raw_reg["firm_sector"], dtype=np.intp),
        household_sector=np.asarray(raw_reg["household_sector"], dtype=np.intp))
    models = {
        LayerKind(name): layer_from_dict(payload, fitnesses, registry,
                                         config.targets)
        for name, payload in raw_layers.items()}
    return PreparedRun(dataset=None, fitnesses=fitnesses, registry=registry,
                       models=models)


def ensure_bundle(config: RunConfig) -> PreparedRun:
    """Load the bundle for this configuration, fitting and storing it if absent."""
    target = bundle_dir(config)
    if all((target / name).exists() for name in BUNDLE_FILES):
        logger.info("loading bundle from %s", target)
        return load_bundle(config)
    prepared = prepare_models(config)
    write_bundle(prepared, config)
    return prepared


@dataclass
class TrialResult:
    """Everything one trial produced, kept until the ordered write pass."""

    trial: int
    topology: MultilayerTopology | None = None
    system: LinearSystem | None = None
    solutions: dict[str, FlowSolution] = field(default_factory=dict)
    diags: dict[str, SolverDiagnostics | None] = field(default_factory=dict)
    error: str | None = None

    def failed(self, method: str) -> bool:
        solution = self.solutions.get(method)
        return solution is None or not solution.converged


def _solve_one(method: str, system: LinearSystem, prepared: PreparedRun,
               config: RunConfig,
               reference: FlowSolution | None) -> FlowSolution:
    if method == "nnls":
        return solve_nnls(system)
    if method == "lsq":
        return solve_least_norm(system)
    if method == "bayes":
        return solve_bayes(system, sigma=config.sigma)
    if method == "dcgm":
        if reference is None or not reference.converged:
            raise SolverError("no converged reference solution to spread")
        return dcgm_weights(system, reference, prepared.models)
    raise ConfigError(f"unknown solver {method!r}")


def _run_trial(prepared: PreparedRun, config: RunConfig, trial: int,
               methods: tuple[str, ...]) -> TrialResult:
    result = TrialResult(trial=trial)
    try:
        result.topology, result.system = sample_trial_system(
            prepared, config, trial)
    except (InfeasibleError, FitError) as exc:
        result.error = str(exc)
        logger.warning("trial %d failed: %s", trial, exc)
        return result
    for method in methods:
        try:
            solution = _solve_one(method, result.system, prepared, config,
                                  result.solutions.get("nnls"))
        except SolverError as exc:
            logger.warning("trial %d: %s failed: %s", trial, method, exc)
            result.diags[method] = None
            continue
        result.solutions[method] = solution
        result.diags[method] = (diagnostics(result.system, solution)
                                if solution.converged else None)
        if not solution.converged:
            logger.warning("trial %d: %s did not converge", trial, method)
    return result


def _method_plan(solver: str, compare: bool) -> tuple[str, ...]:
    """Methods to run per trial, ordered so dcgm always has its reference."""
    wanted = {solver} | (set(COMPARED_METHODS) if compare else set())
    if "dcgm" in wanted:
        wanted.add("nnls")
    return tuple(m for m in ("nnls", "lsq", "bayes", "dcgm") if m in wanted)


def _run_trials(prepared: PreparedRun, config: RunConfig,
                methods: tuple[str, ...]) -> list[TrialResult]:
    workers = min(config.worker_count(), config.trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(
                lambda t: _run_trial(prepared, config, t, methods),
                range(config.trials)))
    return [_run_trial(prepared, config, t, methods)
            for t in range(config.trials)]


def _write_edges(target: Path, trial: int, topology: MultilayerTopology) -> None:
    for kind in LAYER_ORDER:
        layer = topology.layers[kind]
        with open(target / f"trial{trial}_edges_{kind.value}.csv", "w") as fh:
            fh.write("origin,destination\n")
            for origin, dest in layer.edges:
                fh.write(f"{origin},{dest}\n")


def _write_solution(target: Path, trial: int, method: str,
                    system: LinearSystem, solution: FlowSolution) -> None:
    index = system.index
    path = target / f"trial{trial}_solution_{method}.csv"
    with open(path, "w") as fh:
        fh.write("column,layer,origin,destination,value\n")
        for col in range(index.n_cols):
            kind = LAYER_ORDER[index.kinds[col]]
            fh.write(f"{col},{kind.value},{index.origins[col]},"
                     f"{index.dests[col]},{float(solution.xi[col])!r}\n")


def _write_diagnostics(target: Path, trial: int, method: str,
                       solution: FlowSolution,
                       diag: SolverDiagnostics | None) -> None:
    payload = {
        "trial": trial,
        "method": solution.method,
        "converged": solution.converged,
        "iterations": solution.iterations,
        "residual_l2": _json_value(solution.residual_l2),
    }
    if diag is not None:
        payload.update({
            "relative_error_pct": _json_value(diag.relative_error_pct),
            "negative_pct": _json_value(diag.negative_pct),
            "nonzero_count": diag.nonzero_count,
        })
    _dump_json(target / f"trial{trial}_diagnostics_{method}.json", payload)


def cmd_fit(config: RunConfig) -> int:
    prepared = prepare_models(config)
    target = write_bundle(prepared, config)
    for kind in LAYER_ORDER:
        model = prepared.models[kind]
        z = "uniform" if model.z is None else f"z={model.z:.6g}"
        print(f"{kind.value}: {model.model}, {z}, "
              f"expected links {model.expected_links():.2f}")
    print(f"bundle written to {target}")
    return 0


def cmd_run(config: RunConfig, compare: bool) -> int:
    prepared = ensure_bundle(config)
    target = run_dir(config)
    target.mkdir(parents=True, exist_ok=True)
    manifest = dict(config.semantic_fields())
    manifest["config_hash"] = config.config_hash()
    _dump_json(target / "manifest.json", manifest)

    methods = _method_plan(config.solver, compare)
    results = _run_trials(prepared, config, methods)

    partial = False
    for result in results:
        if result.error is not None:
            partial = True
            continue
        assert result.topology is not None and result.system is not None
        _write_edges(target, result.trial, result.topology)
        solution = result.solutions.get(config.solver)
        if solution is not None:
            _write_solution(target, result.trial, config.solver,
                            result.system, solution)
            _write_diagnostics(target, result.trial, config.solver, solution,
                               result.diags.get(config.solver))
        if result.failed(config.solver):
            partial = True
        diag = result.diags.get(config.solver)
        if diag is not None:
            print(f"trial {result.trial}: {config.solver} "
                  f"rel_err={diag.relative_error_pct:.4f}% "
                  f"neg={diag.negative_pct:.4f}%")
        else:
            print(f"trial {result.trial}: {config.solver} failed")

    if compare:
        per_trial = {
            method: [r.diags.get(method) for r in results]
            for method in COMPARED_METHODS}
        report = aggregate_report(per_trial, config, config.trials,
                                  config.seed)
        paths = write_report(report, target)
        for method in COMPARED_METHODS:
            print(f"{method}: mean rel_err="
                  f"{report.mean_relative_error_pct[method]:.4f}% "
                  f"mean neg={report.mean_negative_pct[method]:.4f}% "
                  f"failures={report.failures[method]}")
        print(f"report written to {paths[0]}")

    if partial:
        print("some trials failed; see log for details", file=sys.stderr)
        return 3
    return 0


def _write_degree_tables(target: Path, trial: int, prepared: PreparedRun,
                         topology: MultilayerTopology) -> None:
    with open(target / f"trial{trial}_degrees.csv", "w") as fh:
        fh.write("layer,side,node,expected_degree,degree_variance,"
                 "sampled_degree\n")
        for kind in LAYER_ORDER:
            stats = degree_stats(prepared.models[kind],
                                 [topology.layers[kind]])
            assert stats.sampled_out is not None
            assert stats.sampled_in is not None
            for side, expected, variance, sampled in (
                    ("origin", stats.expected_out, stats.variance_out,
                     stats.sampled_out[0]),
                    ("destination", stats.expected_in, stats.variance_in,
                     stats.sampled_in[0])):
                for node in range(len(expected)):
                    fh.write(f"{kind.value},{side},{node},"
                             f"{float(expected[node])!r},"
                             f"{float(variance[node])!r},"
                             f"{int(sampled[node])}\n")


def _write_annd_tables(target: Path, trial: int, prepared: PreparedRun,
                       topology: MultilayerTopology) -> None:
    with open(target / f"trial{trial}_annd.csv", "w") as fh:
        fh.write("layer,side,node,model_annd,sampled_annd\n")
        for kind in LAYER_ORDER:
            model_out, model_in = annd(prepared.models[kind])
            samp_out, samp_in = annd(topology.layers[kind])
            for side, model_vals, samp_vals in (
                    ("origin", model_out, samp_out),
                    ("destination", model_in, samp_in)):
                for node in range(len(model_vals)):
                    fh.write(f"{kind.value},{side},{node},"
                             f"{float(model_vals[node])!r},"
                             f"{float(samp_vals[node])!r}\n")


def _write_budget_table(target: Path, trial: int, method: str,
                        system: LinearSystem, solution: FlowSolution,
                        registry: AgentRegistry) -> None:
    records = budgets(system, solution, registry)
    names = [kind.value for kind in LAYER_ORDER]
    with open(target / f"trial{trial}_budgets_{method}.csv", "w") as fh:
        fh.write("agent_class,index,sector,"
                 + ",".join(f"in_{n}" for n in names) + ","
                 + ",".join(f"out_{n}" for n in names) + ",net\n")
        for rec in records:
            sector = "" if rec.sector is None else rec.sector
            inflow = ",".join(repr(rec.inflows[n]) for n in names)
            outflow = ",".join(repr(rec.outflows[n]) for n in names)
            fh.write(f"{rec.agent_class},{rec.index},{sector},"
                     f"{inflow},{outflow},{rec.net!r}\n")


def _write_flow_degree_table(target: Path, trial: int, method: str,
                             system: LinearSystem, solution: FlowSolution,
                             registry: AgentRegistry, kind: LayerKind,
                             side: str) -> None:
    table = flow_vs_degree(system, solution, kind, side, registry)
    path = target / f"trial{trial}_flow_{kind.value}_{side}_{method}.csv"
    with open(path, "w") as fh:
        fh.write("node,sector,degree,flow\n")
        for i in range(len(table.node)):
            sector = "" if table.sector[i] is None else table.sector[i]
            fh.write(f"{int(table.node[i])},{sector},{int(table.degree[i])},"
                     f"{float(table.flow[i])!r}\n")


def cmd_metrics(config: RunConfig, trial: int, layer: str, side: str) -> int:
    prepared = ensure_bundle(config)
    target = run_dir(config)
    target.mkdir(parents=True, exist_ok=True)
    result = _run_trial(prepared, config, trial,
                        _method_plan(config.solver, compare=False))
    if result.error is not None:
        raise InfeasibleError(result.error)
    assert result.topology is not None and result.system is not None
    _write_degree_tables(target, trial, prepared, result.topology)
    _write_annd_tables(target, trial, prepared, result.topology)
    solution = result.solutions.get(config.solver)
    if solution is None or not solution.converged:
        print(f"trial {trial}: {config.solver} failed", file=sys.stderr)
        return 3
    _write_budget_table(target, trial, config.solver, result.system, solution,
                        prepared.registry)
    _write_flow_degree_table(target, trial, config.solver, result.system,
                             solution, prepared.registry, LayerKind(layer),
                             side)
    print(f"metric tables for trial {trial} written to {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON file with base settings; flags win")
    common.add_argument("--data", dest="data_dir", metavar="DIR",
                        help="directory with the account tables")
    common.add_argument("--out", dest="out_dir", metavar="DIR",
                        help="output directory")
    common.add_argument("--sector-config", metavar="PATH",
                        help="JSON mapping of activity codes to sectors")
    common.add_argument("--include-agriculture", action="store_true",
                        default=None,
                        help="keep agriculture instead of dropping it")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--nb", type=int, help="number of banks")
    common.add_argument("--nf", type=int, help="number of firms")
    common.add_argument("--nh", type=int, help="number of households")
    common.add_argument("--alpha0", type=float,
                        help="per-household consumption level")
    common.add_argument("--model", choices=MODEL_TYPES,
                        help="investment/wage ensemble variant")
    common.add_argument("--solver", choices=SOLVERS,
                        help="reconstruction method for run outputs")
    common.add_argument("--trials", type=int, help="number of sampled trials")
    common.add_argument("--threads", type=int,
                        help="worker threads; default: all cores")
    common.add_argument("--sigma", type=float,
                        help="prior variance for the bayes solver")
    for flag, text in (("--k-cons", "household consumption degree"),
                       ("--k-wage", "household wage degree"),
                       ("--k-inv", "firm investment degree"),
                       ("--k-loans", "firm loan-interest degree"),
                       ("--k-dep", "household deposit-interest degree")):
        common.add_argument(flag, type=float, help=f"target {text}")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress; repeat for debug output")

    parser = _Parser(prog="flowrecon",
                     description="Reconstruct multilayer money-flow networks "
                                 "from sector accounts.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common],
                   help="calibrate layer ensembles and store the bundle")
    run_p = sub.add_parser("run", parents=[common],
                           help="sample topologies, solve and write outputs")
    run_p.add_argument("--compare", action="store_true",
                       help="also benchmark nnls, bayes and dcgm")
    sub.add_parser("compare", parents=[common],
                   help="run with the method comparison enabled")
    met_p = sub.add_parser("metrics", parents=[common],
                           help="write degree, neighbor-degree, budget and "
                                "flow tables for one trial")
    met_p.add_argument("--trial", type=int, default=0,
                       help="trial index to analyze")
    met_p.add_argument("--layer", choices=[k.value for k in LAYER_ORDER],
                       default=LayerKind.CONSUMPTION.value,
                       help="layer for the flow-versus-degree table")
    met_p.add_argument("--side", choices=["origin", "destination"],
                       default="destination",
                       help="layer side for the flow-versus-degree table")
    return parser


_OVERRIDE_KEYS = ("data_dir", "out_dir", "sector_config",
                  "include_agriculture", "seed", "nb", "nf", "nh", "alpha0",
                  "model", "solver", "trials", "threads", "sigma", "k_cons",
                  "k_wage", "k_inv", "k_loans", "k_dep")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key) for key in _OVERRIDE_KEYS}
    config = load_config(args.config, overrides)
    config.validate()
    return config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = (logging.WARNING, logging.INFO, logging.DEBUG)[
            min(args.verbose, 2)]
        logging.basicConfig(level=level,
                            format="%(levelname)s %(name)s: %(message)s")
        config = _config_from_args(args)
        if args.command == "fit":
            return cmd_fit(config)
        if args.command == "run":
            return cmd_run(config, compare=args.compare)
        if args.command == "compare":
            return cmd_run(config, compare=True)
        return cmd_metrics(config, args.trial, args.layer, args.side)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (FitError, InfeasibleError, SolverError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
