"""Network and budget statistics, plus the multi-method comparison driver.

Degree and neighbor-degree statistics work on both a fitted layer model
(expectations under independent links) and a concrete sampled layer.
Budget records split each agent's solved flows into per-layer income and
spending.  :func:`compare_methods` runs the full pipeline end to end over
many sampled topologies and averages the solver diagnostics.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .config import RunConfig
from .ensembles import (LAYER_ORDER, LAYER_SIDES, AgentClass, LayerKind,
                        LayerModel, SampledLayer, build_all_layers)
from .errors import InfeasibleError, SolverError
from .ingest import (AgentRegistry, FitnessSet, SectorDataset, build_registry,
                     compute_fitnesses, load_dataset)
from .solvers import (FlowSolution, SolverDiagnostics, dcgm_weights,
                      diagnostics, solve_bayes, solve_nnls)
from .system import (LinearSystem, MultilayerTopology, assemble,
                     augment_alpha0, edge_rows, sample_topology)

logger = logging.getLogger(__name__)

COMPARED_METHODS = ("nnls", "bayes", "dcgm")


@dataclass(frozen=True)
class DegreeStats:
    """Degree moments of one layer, by side.

    Expectations and variances are the independent-link values (sums of
    ``p`` and ``p (1 - p)``).  When samples are supplied, ``sampled_out``
    and ``sampled_in`` hold one realized degree sequence per row.
    """

    kind: LayerKind
    expected_out: np.ndarray
    expected_in: np.ndarray
    variance_out: np.ndarray
    variance_in: np.ndarray
    sampled_out: np.ndarray | None = None
    sampled_in: np.ndarray | None = None


def degree_stats(model: LayerModel,
                 samples: list[SampledLayer] | None = None) -> DegreeStats:
    """Expected degrees per node, with realized degrees when samples are given."""
    probs = model.probs
    n_origin, n_dest = probs.shape
    sampled_out = sampled_in = None
    if samples is not None:
        sampled_out = np.stack([
            np.bincount(s.edges[:, 0], minlength=n_origin) for s in samples])
        sampled_in = np.stack([
            np.bincount(s.edges[:, 1], minlength=n_dest) for s in samples])
    return DegreeStats(kind=model.kind,
                       expected_out=probs.sum(axis=1),
                       expected_in=probs.sum(axis=0),
                       variance_out=(probs * (1.0 - probs)).sum(axis=1),
                       variance_in=(probs * (1.0 - probs)).sum(axis=0),
                       sampled_out=sampled_out, sampled_in=sampled_in)


def _annd_sampled(layer: SampledLayer) -> tuple[np.ndarray, np.ndarray]:
    adj = np.zeros(layer.shape)
    if layer.n_edges:
        adj[layer.edges[:, 0], layer.edges[:, 1]] = 1.0
    k_out = adj.sum(axis=1)
    k_in = adj.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(k_out > 0, (adj @ k_in) / k_out, np.nan)
        inn = np.where(k_in > 0, (adj.T @ k_out) / k_in, np.nan)
    return out, inn


def _annd_expected(model: LayerModel) -> tuple[np.ndarray, np.ndarray]:
    p = model.probs
    k_out = p.sum(axis=1)
    k_in = p.sum(axis=0)
    # the focal node's own link is excluded from each neighbor's degree
    num_out = p @ k_in - (p * p).sum(axis=1)
    num_in = p.T @ k_out - (p * p).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(k_out > 0, num_out / k_out, np.nan)
        inn = np.where(k_in > 0, num_in / k_in, np.nan)
    return out, inn


def annd(layer_or_model: SampledLayer | LayerModel) -> tuple[np.ndarray, np.ndarray]:
    """Average neighbor degree per node, as ``(origin side, destination side)``.

    For a node on the origin side this is the mean destination-side degree
    of its neighbors, weighted by its own links, and symmetrically for the
    destination side.  For a sampled layer the formula runs on the realized
    adjacency; for a model it runs on link probabilities, with the focal
    node's own contribution excluded from each neighbor's expected degree.
    Nodes without links get NaN.
    """
    if isinstance(layer_or_model, SampledLayer):
        return _annd_sampled(layer_or_model)
    return _annd_expected(layer_or_model)


@dataclass(frozen=True)
class BudgetRecord:
    """Solved income and spending of one agent, split by layer."""

    agent_class: str
    index: int
    sector: str | None
    inflows: dict[str, float]
    outflows: dict[str, float]

    @property
    def net(self) -> float:
        return sum(self.inflows.values()) - sum(self.outflows.values())


def budgets(system: LinearSystem, solution: FlowSolution,
            registry: AgentRegistry | None = None) -> list[BudgetRecord]:
    """Per-agent budget records for one solved system."""
    nb, nf, nh = system.counts
    n_agents = nb + nf + nh
    inflow = {kind: np.zeros(n_agents) for kind in LAYER_ORDER}
    outflow = {kind: np.zeros(n_agents) for kind in LAYER_ORDER}
    for kind in LAYER_ORDER:
        sl = system.index.layer_slice(kind)
        values = solution.xi[sl]
        payer, receiver = edge_rows(system.index, system.counts, kind)
        outflow[kind] += np.bincount(payer, weights=values, minlength=n_agents)
        inflow[kind] += np.bincount(receiver, weights=values, minlength=n_agents)

    def sector_of(agent_class: AgentClass, idx: int) -> str | None:
        if registry is None or agent_class is AgentClass.BANK:
            return None
        codes = (registry.firm_sector if agent_class is AgentClass.FIRM
                 else registry.household_sector)
        return registry.sectors[codes[idx]]

    records = []
    boundaries = ((AgentClass.BANK, 0, nb), (AgentClass.FIRM, nb, nb + nf),
                  (AgentClass.HOUSEHOLD, nb + nf, n_agents))
    for agent_class, lo, hi in boundaries:
        for row in range(lo, hi):
            idx = row - lo
            records.append(BudgetRecord(
                agent_class=agent_class.value, index=idx,
                sector=sector_of(agent_class, idx),
                inflows={k.value: float(inflow[k][row]) for k in LAYER_ORDER},
                outflows={k.value: float(outflow[k][row]) for k in LAYER_ORDER}))
    return records


@dataclass(frozen=True)
class FlowDegreeTable:
    """Degree and total flow per node on one side of a layer."""

    kind: LayerKind
    side: str
    node: np.ndarray
    degree: np.ndarray
    flow: np.ndarray
    sector: tuple[str | None, ...]


def flow_vs_degree(system: LinearSystem, solution: FlowSolution, kind: LayerKind,
                   side: str = "destination",
                   registry: AgentRegistry | None = None) -> FlowDegreeTable:
    """Realized degree and summed flow per node on one side of a layer."""
    if side not in ("origin", "destination"):
        raise ValueError(f"side must be 'origin' or 'destination', got {side!r}")
    sl = system.index.layer_slice(kind)
    nodes = system.index.origins[sl] if side == "origin" else system.index.dests[sl]
    n_side = system.index.shapes[kind][0 if side == "origin" else 1]
    degree = np.bincount(nodes, minlength=n_side)
    flow = np.bincount(nodes, weights=solution.xi[sl], minlength=n_side)
    agent_class = LAYER_SIDES[kind][0 if side == "origin" else 1]
    if registry is None or agent_class is AgentClass.BANK:
        sector: tuple[str | None, ...] = (None,) * n_side
    else:
        codes = (registry.firm_sector if agent_class is AgentClass.FIRM
                 else registry.household_sector)
        sector = tuple(registry.sectors[c] for c in codes[:n_side])
    return FlowDegreeTable(kind=kind, side=side, node=np.arange(n_side),
                           degree=degree, flow=flow, sector=sector)


@dataclass(frozen=True)
class PreparedRun:
    """Everything deterministic about a run before topologies are drawn.

    ``dataset`` is ``None`` when the run was restored from a stored bundle
    rather than fitted from raw account tables.
    """

    dataset: SectorDataset | None
    fitnesses: FitnessSet
    registry: AgentRegistry
    models: dict[LayerKind, LayerModel]


def prepare_models(config: RunConfig) -> PreparedRun:
    """Load data and calibrate all five layer ensembles for one configuration."""
    config.validate()
    dataset = load_dataset(config.data_dir, config.sector_table())
    fitnesses = compute_fitnesses(
        dataset, config.nf, seeding.substream(config.seed, seeding.FIRM_ACTIVITY))
    registry = build_registry(
        dataset, config.nb, config.nf, config.nh,
        seeding.substream(config.seed, seeding.HOUSEHOLD_SECTORS))
    models = build_all_layers(fitnesses, registry, config.targets, config.model)
    return PreparedRun(dataset=dataset, fitnesses=fitnesses, registry=registry,
                       models=models)


def sample_trial_system(prepared: PreparedRun, config: RunConfig,
                        trial: int) -> tuple[MultilayerTopology, LinearSystem]:
    """Draw one topology and assemble its augmented balance system."""
    topology = sample_topology(prepared.models, config.nb, config.nf, config.nh,
                               config.seed, trial)
    return topology, augment_alpha0(assemble(topology), config.alpha0)


@dataclass(frozen=True)
class ComparisonReport:
    """Mean solver diagnostics over an ensemble of sampled topologies."""

    n_trials: int
    master_seed: int
    config_hash: str
    mean_relative_error_pct: dict[str, float]
    mean_negative_pct: dict[str, float]
    failures: dict[str, int]
    per_trial: dict[str, tuple[SolverDiagnostics | None, ...]]


def aggregate_report(per_trial: dict[str, list[SolverDiagnostics | None]],
                     config: RunConfig, n_trials: int,
                     master_seed: int) -> ComparisonReport:
    """Average per-trial diagnostics, skipping failed trials per method."""
    mean_rel, mean_neg, failures = {}, {}, {}
    for method, diags in per_trial.items():
        good = [d for d in diags if d is not None]
        failures[method] = len(diags) - len(good)
        mean_rel[method] = (float(np.mean([d.relative_error_pct for d in good]))
                            if good else float("nan"))
        mean_neg[method] = (float(np.mean([d.negative_pct for d in good]))
                            if good else float("nan"))
    return ComparisonReport(n_trials=n_trials, master_seed=master_seed,
                            config_hash=config.config_hash(),
                            mean_relative_error_pct=mean_rel,
                            mean_negative_pct=mean_neg, failures=failures,
                            per_trial={m: tuple(v) for m, v in per_trial.items()})


def _compare_one_trial(prepared: PreparedRun, config: RunConfig,
                       trial: int) -> dict[str, SolverDiagnostics | None]:
    out: dict[str, SolverDiagnostics | None] = dict.fromkeys(COMPARED_METHODS)
    try:
        _, augmented = sample_trial_system(prepared, config, trial)
    except InfeasibleError as exc:
        logger.warning("trial %d skipped: %s", trial, exc)
        return out
    nnls_sol = solve_nnls(augmented)
    if nnls_sol.converged:
        out["nnls"] = diagnostics(augmented, nnls_sol)
        out["dcgm"] = diagnostics(
            augmented, dcgm_weights(augmented, nnls_sol, prepared.models))
    try:
        out["bayes"] = diagnostics(augmented, solve_bayes(augmented,
                                                          sigma=config.sigma))
    except SolverError as exc:
        logger.warning("trial %d: bayes failed: %s", trial, exc)
    logger.debug("trial %d done", trial)
    return out


def compare_methods(config: RunConfig, n_trials: int | None = None,
                    master_seed: int | None = None) -> ComparisonReport:
    """Run the reconstruction pipeline repeatedly and compare the solvers.

    Each trial draws a fresh topology from the fitted ensembles, assembles
    the augmented system and solves it with the nonnegative, posterior-mean
    and degree-corrected methods (the latter reusing the nonnegative flows
    as its reference).  Trials where a solver fails are excluded from that
    solver's averages and counted in ``failures``.
    """
    prepared = prepare_models(config)
    n = n_trials if n_trials is not None else config.trials
    seed = master_seed if master_seed is not None else config.seed
    cfg = config if seed == config.seed else config.replace(seed=seed)

    workers = cfg.worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda t: _compare_one_trial(prepared, cfg, t), range(n)))
    else:
        results = [_compare_one_trial(prepared, cfg, t) for t in range(n)]

    per_trial = {m: [r[m] for r in results] for m in COMPARED_METHODS}
    return aggregate_report(per_trial, cfg, n, seed)


def write_report(report: ComparisonReport, out_dir: str | Path) -> list[Path]:
    """Write a comparison report as JSON plus a per-method CSV summary.

    File names carry the master seed and the configuration hash so runs of
    different setups never overwrite each other.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"comparison_seed{report.master_seed}_{report.config_hash}"
    payload = {
        "n_trials": report.n_trials,
        "master_seed": report.master_seed,
        "config_hash": report.config_hash,
        "mean_relative_error_pct": report.mean_relative_error_pct,
        "mean_negative_pct": report.mean_negative_pct,
        "failures": report.failures,
        "per_trial": {
            method: [None if d is None else {
                "relative_error_pct": d.relative_error_pct,
                "negative_pct": d.negative_pct,
                "nonzero_count": d.nonzero_count,
            } for d in diags]
            for method, diags in report.per_trial.items()
        },
    }
    json_path = out_dir / f"{stem}.json"
    with open(json_path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w") as fh:
        fh.write("method,mean_relative_error_pct,mean_negative_pct,failures\n")
        for method in report.per_trial:
            fh.write(f"{method},{report.mean_relative_error_pct[method]!r},"
                     f"{report.mean_negative_pct[method]!r},"
                     f"{report.failures[method]}\n")
    return [json_path, csv_path]
