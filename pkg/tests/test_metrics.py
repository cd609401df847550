from __future__ import annotations

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from flowrecon import seeding
from flowrecon.ensembles import (BLOCK, LayerKind, LayerModel, SampledLayer,
                                 sample_layer)
from flowrecon.metrics import (annd, budgets, compare_methods, degree_stats,
                               flow_vs_degree, prepare_models, write_report)
from flowrecon.solvers import FlowSolution, solve_nnls
from flowrecon.system import MultilayerTopology, assemble

from conftest import small_run_config


def _uniform_model(shape: tuple[int, int], p: float,
                   kind: LayerKind = LayerKind.DEPOSIT_INTEREST) -> LayerModel:
    return LayerModel(kind=kind, model=BLOCK, probs=np.full(shape, p), z=None,
                      target_links=p * shape[0] * shape[1],
                      admissible=shape[0] * shape[1], fitness_ref=())


def _layer(kind: LayerKind, shape: tuple[int, int],
           edges: list[tuple[int, int]]) -> SampledLayer:
    return SampledLayer(kind=kind, shape=shape,
                        edges=np.array(edges, dtype=np.int64).reshape(-1, 2))


def test_uniform_degree_stats_follow_the_binomial() -> None:
    stats = degree_stats(_uniform_model((10, 8), 0.5))
    assert_allclose(stats.expected_out, np.full(10, 4.0))
    assert_allclose(stats.expected_in, np.full(8, 5.0))
    assert_allclose(stats.variance_out, np.full(10, 2.0))
    assert_allclose(stats.variance_in, np.full(8, 2.5))
    assert stats.sampled_out is None and stats.sampled_in is None


def test_sampled_degrees_stack_one_row_per_draw() -> None:
    model = _uniform_model((4, 3), 0.6)
    samples = [sample_layer(model, seeding.substream(0, 99, t))
               for t in range(5)]
    stats = degree_stats(model, samples)
    assert stats.sampled_out.shape == (5, 4)
    assert stats.sampled_in.shape == (5, 3)
    for t, layer in enumerate(samples):
        assert stats.sampled_out[t].sum() == layer.n_edges
        assert stats.sampled_in[t].sum() == layer.n_edges


def test_sampled_mean_degree_tracks_the_expected_degree() -> None:
    model = _uniform_model((10, 10), 0.5)
    samples = [sample_layer(model, seeding.substream(0, 98, t))
               for t in range(1000)]
    stats = degree_stats(model, samples)
    standard_error = np.sqrt(10 * 0.25 / 1000)
    assert np.abs(stats.sampled_out.mean(axis=0) - 5.0).max() \
        <= 4 * standard_error


def test_block_degrees_are_constant_within_sectors(small_prepared) -> None:
    registry = small_prepared.registry
    wages = degree_stats(small_prepared.models[LayerKind.WAGES])
    for code in range(len(registry.sectors)):
        values = wages.expected_out[registry.household_sector == code]
        if len(values):
            assert np.ptp(values) == 0.0
    consumption = degree_stats(small_prepared.models[LayerKind.CONSUMPTION])
    assert np.ptp(consumption.expected_out) <= 1e-12


def test_neighbor_degree_of_a_single_edge_is_one() -> None:
    layer = _layer(LayerKind.CONSUMPTION, (2, 2), [(0, 1)])
    out, inn = annd(layer)
    assert out[0] == 1.0 and np.isnan(out[1])
    assert inn[1] == 1.0 and np.isnan(inn[0])


def test_neighbor_degree_of_a_star_splits_center_and_leaves() -> None:
    layer = _layer(LayerKind.CONSUMPTION, (1, 3), [(0, 0), (0, 1), (0, 2)])
    out, inn = annd(layer)
    assert out[0] == 1.0
    assert_array_equal(inn, np.full(3, 3.0))


def test_sampled_neighbor_degrees_match_direct_enumeration() -> None:
    rng = np.random.default_rng(17)
    for _ in range(10):
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 7)))
        mask = rng.random(shape) < 0.4
        layer = _layer(LayerKind.CONSUMPTION, shape,
                       [tuple(e) for e in np.argwhere(mask)])
        out, inn = annd(layer)
        k_out = mask.sum(axis=1)
        k_in = mask.sum(axis=0)
        for i in range(shape[0]):
            neighbors = np.flatnonzero(mask[i])
            if not len(neighbors):
                assert np.isnan(out[i])
            else:
                assert out[i] == pytest.approx(k_in[neighbors].mean())
        for j in range(shape[1]):
            neighbors = np.flatnonzero(mask[:, j])
            if not len(neighbors):
                assert np.isnan(inn[j])
            else:
                assert inn[j] == pytest.approx(k_out[neighbors].mean())


def test_expected_neighbor_degree_excludes_the_focal_link() -> None:
    out, inn = annd(_uniform_model((2, 2), 0.5))
    # each neighbor's expected degree is 1, half of which is the focal link
    assert_allclose(out, np.full(2, 0.5))
    assert_allclose(inn, np.full(2, 0.5))


def _tiny_system():
    topology = MultilayerTopology(nb=1, nf=2, nh=3, layers={
        LayerKind.CONSUMPTION: _layer(LayerKind.CONSUMPTION, (3, 2),
                                      [(0, 0), (1, 0), (0, 1), (1, 1), (2, 1)]),
        LayerKind.INVESTMENT: _layer(LayerKind.INVESTMENT, (2, 2), [(0, 1)]),
        LayerKind.WAGES: _layer(LayerKind.WAGES, (3, 2),
                                [(0, 0), (1, 0), (2, 1)]),
        LayerKind.LOAN_INTEREST: _layer(LayerKind.LOAN_INTEREST, (2, 1),
                                        [(0, 0)]),
        LayerKind.DEPOSIT_INTEREST: _layer(LayerKind.DEPOSIT_INTEREST, (3, 1),
                                           [(0, 0), (1, 0), (2, 0)]),
    })
    return assemble(topology)


def test_budgets_split_known_flows_by_layer_and_direction() -> None:
    system = _tiny_system()
    xi = np.arange(1.0, 14.0)
    solution = FlowSolution(xi=xi, method="nnls", iterations=0,
                            residual_l2=0.0, wall_time=0.0)
    records = {(r.agent_class, r.index): r for r in budgets(system, solution)}
    bank = records[("bank", 0)]
    assert bank.inflows["loan_interest"] == 10.0
    assert bank.outflows["deposit_interest"] == 11.0 + 12.0 + 13.0
    assert bank.net == pytest.approx(10.0 - 36.0)
    firm0 = records[("firm", 0)]
    assert firm0.inflows["consumption"] == 1.0 + 2.0
    assert firm0.outflows["investment"] == 6.0
    assert firm0.outflows["wages"] == 7.0 + 8.0
    assert firm0.outflows["loan_interest"] == 10.0
    household0 = records[("household", 0)]
    assert household0.inflows["wages"] == 7.0
    assert household0.inflows["deposit_interest"] == 11.0
    assert household0.outflows["consumption"] == 1.0 + 3.0
    assert household0.inflows["investment"] == 0.0
    assert household0.sector is None


def test_solved_budgets_balance_for_every_agent(small_trial,
                                                small_prepared) -> None:
    _, system = small_trial
    solution = solve_nnls(system)
    assert solution.converged
    scale = float(np.abs(solution.xi).sum())
    records = budgets(system, solution, small_prepared.registry)
    assert len(records) == sum(system.counts)
    for record in records:
        assert abs(record.net) <= 1e-8 * scale
    households = [r for r in records if r.agent_class == "household"]
    for record in households:
        assert record.outflows["consumption"] == pytest.approx(
            system.alpha0, abs=1e-6)
        assert record.sector in small_prepared.registry.sectors


def test_flow_by_degree_recovers_the_spending_anchor(small_trial,
                                                     small_prepared) -> None:
    _, system = small_trial
    solution = solve_nnls(system)
    table = flow_vs_degree(system, solution, LayerKind.CONSUMPTION,
                           side="origin", registry=small_prepared.registry)
    assert table.side == "origin"
    assert (table.degree >= 1).all()
    assert_allclose(table.flow, np.full(len(table.node), system.alpha0),
                    atol=1e-6)
    assert all(s in small_prepared.registry.sectors for s in table.sector)


def test_flow_by_degree_gives_isolated_nodes_zero_flow() -> None:
    system = _tiny_system()
    solution = FlowSolution(xi=np.arange(1.0, 14.0), method="nnls",
                            iterations=0, residual_l2=0.0, wall_time=0.0)
    table = flow_vs_degree(system, solution, LayerKind.LOAN_INTEREST,
                           side="origin")
    assert_array_equal(table.degree, [1, 0])
    assert_array_equal(table.flow, [10.0, 0.0])
    with pytest.raises(ValueError, match="side"):
        flow_vs_degree(system, solution, LayerKind.LOAN_INTEREST, side="both")


def test_model_preparation_is_deterministic(small_config) -> None:
    first = prepare_models(small_config)
    second = prepare_models(small_config)
    assert_array_equal(first.registry.firm_sector, second.registry.firm_sector)
    assert_array_equal(first.registry.household_sector,
                       second.registry.household_sector)
    for kind, model in first.models.items():
        assert_array_equal(model.probs, second.models[kind].probs)


def test_method_comparison_reports_are_reproducible() -> None:
    config = small_run_config(trials=2)
    first = compare_methods(config)
    second = compare_methods(config)
    assert first == second
    assert first.n_trials == 2
    assert set(first.per_trial) == {"nnls", "bayes", "dcgm"}
    assert first.failures["nnls"] == 0
    assert first.mean_relative_error_pct["nnls"] <= 1.0


def test_reports_are_written_under_seed_and_hash_names(tmp_path) -> None:
    config = small_run_config(trials=1)
    report = compare_methods(config)
    paths = write_report(report, tmp_path)
    stem = f"comparison_seed{config.seed}_{config.config_hash()}"
    assert [p.name for p in paths] == [f"{stem}.json", f"{stem}.csv"]
    payload = json.loads(paths[0].read_text())
    assert payload["n_trials"] == 1
    assert len(payload["per_trial"]["nnls"]) == 1
    lines = paths[1].read_text().splitlines()
    assert lines[0] == "method,mean_relative_error_pct,mean_negative_pct,failures"
    assert len(lines) == 4
