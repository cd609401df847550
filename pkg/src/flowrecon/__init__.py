"""Reconstruction of multilayer money-flow networks from sector accounts.

The pipeline runs in five stages: ingest national-accounts tables into
sector-level fitnesses and an agent registry, fit maximum-entropy link
ensembles per transaction layer, sample topologies, assemble the sparse
agent-balance system and solve it for the flows, then summarize the result
with network and budget statistics.  The :mod:`flowrecon.cli` module wires
the stages into a deterministic batch command.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .ensembles import (LAYER_ORDER, BLOCK, RFITNESS, DegreeTargets,
                        LayerKind, LayerModel, SampledLayer, build_all_layers,
                        build_layer, fit_z, sample_layer)
from .errors import (ConfigError, DataError, FitError, FlowreconError,
                     InfeasibleError, SolverError)
from .ingest import (AgentRegistry, FitnessSet, SectorDataset, build_registry,
                     compute_fitnesses, load_dataset)
from .metrics import (BudgetRecord, ComparisonReport, DegreeStats,
                      FlowDegreeTable, PreparedRun, annd, budgets,
                      compare_methods, degree_stats, flow_vs_degree,
                      prepare_models, sample_trial_system, write_report)
from .solvers import (FlowSolution, SolverDiagnostics, bayes_mean,
                      dcgm_weights, diagnostics, least_norm, nnls, solve_bayes,
                      solve_least_norm, solve_nnls)
from .system import (ColumnIndex, LinearSystem, MultilayerTopology, assemble,
                     augment_alpha0, density, read_system, sample_topology,
                     write_system)

__all__ = [
    "__version__",
    "AgentRegistry", "BLOCK", "BudgetRecord", "ColumnIndex",
    "ComparisonReport", "ConfigError", "DataError", "DegreeStats",
    "DegreeTargets", "FitError", "FitnessSet", "FlowDegreeTable",
    "FlowSolution", "FlowreconError", "InfeasibleError", "LAYER_ORDER",
    "LayerKind", "LayerModel", "LinearSystem", "MultilayerTopology",
    "PreparedRun", "RFITNESS", "RunConfig", "SampledLayer", "SectorDataset",
    "SolverDiagnostics", "SolverError", "annd", "assemble", "augment_alpha0",
    "bayes_mean", "budgets", "build_all_layers", "build_layer",
    "build_registry", "compare_methods", "compute_fitnesses", "dcgm_weights",
    "degree_stats", "density", "diagnostics", "fit_z", "flow_vs_degree",
    "least_norm", "load_config", "load_dataset", "nnls", "prepare_models",
    "read_system", "sample_layer", "sample_topology", "sample_trial_system",
    "solve_bayes", "solve_least_norm", "solve_nnls", "write_report",
    "write_system",
]
