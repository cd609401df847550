from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from flowrecon.ensembles import (LAYER_ORDER, AgentClass, LayerKind,
                                 SampledLayer)
from flowrecon.errors import InfeasibleError
from flowrecon.system import (MultilayerTopology, agent_of_row, agent_row,
                              assemble, augment_alpha0, density, read_system,
                              sample_topology, write_system)


def _layer(kind: LayerKind, shape: tuple[int, int],
           edges: list[tuple[int, int]]) -> SampledLayer:
    return SampledLayer(kind=kind, shape=shape,
                        edges=np.array(edges, dtype=np.int64).reshape(-1, 2))


def _tiny_topology(consumption: list[tuple[int, int]] | None = None
                   ) -> MultilayerTopology:
    """Three households, two firms, one bank; thirteen edges by default."""
    if consumption is None:
        consumption = [(0, 0), (1, 0), (0, 1), (1, 1), (2, 1)]
    return MultilayerTopology(nb=1, nf=2, nh=3, layers={
        LayerKind.CONSUMPTION: _layer(LayerKind.CONSUMPTION, (3, 2), consumption),
        LayerKind.INVESTMENT: _layer(LayerKind.INVESTMENT, (2, 2), [(0, 1)]),
        LayerKind.WAGES: _layer(LayerKind.WAGES, (3, 2),
                                [(0, 0), (1, 0), (2, 1)]),
        LayerKind.LOAN_INTEREST: _layer(LayerKind.LOAN_INTEREST, (2, 1),
                                        [(0, 0)]),
        LayerKind.DEPOSIT_INTEREST: _layer(LayerKind.DEPOSIT_INTEREST, (3, 1),
                                           [(0, 0), (1, 0), (2, 0)]),
    })


def test_assembled_system_has_one_signed_pair_per_column() -> None:
    system = assemble(_tiny_topology())
    assert system.shape == (6, 13)
    assert system.A.nnz == 26
    assert_array_equal(system.b, np.zeros(6))
    dense = system.A.toarray()
    assert_array_equal(dense.sum(axis=0), np.zeros(13))
    assert_array_equal(np.abs(dense).sum(axis=0), np.full(13, 2.0))


def test_columns_come_in_layer_order_sorted_by_destination() -> None:
    index = assemble(_tiny_topology()).index
    assert index.n_cols == 13
    expected = [
        (LayerKind.CONSUMPTION, 0, 0), (LayerKind.CONSUMPTION, 1, 0),
        (LayerKind.CONSUMPTION, 0, 1), (LayerKind.CONSUMPTION, 1, 1),
        (LayerKind.CONSUMPTION, 2, 1),
        (LayerKind.INVESTMENT, 0, 1),
        (LayerKind.WAGES, 0, 0), (LayerKind.WAGES, 1, 0),
        (LayerKind.WAGES, 2, 1),
        (LayerKind.LOAN_INTEREST, 0, 0),
        (LayerKind.DEPOSIT_INTEREST, 0, 0), (LayerKind.DEPOSIT_INTEREST, 1, 0),
        (LayerKind.DEPOSIT_INTEREST, 2, 0),
    ]
    assert [index.pair_of(c) for c in range(13)] == expected
    for c, (kind, origin, dest) in enumerate(expected):
        assert index.column_of(kind, origin, dest) == c
    with pytest.raises(KeyError, match="consumption"):
        index.column_of(LayerKind.CONSUMPTION, 2, 0)
    with pytest.raises(KeyError, match="out of range"):
        index.pair_of(13)


def test_payment_direction_follows_the_layer_semantics() -> None:
    system = assemble(_tiny_topology())
    dense = system.A.toarray()
    bank, firm0, firm1 = 0, 1, 2
    h0, h2 = 3, 5
    # household 0 buys from firm 0
    assert dense[h0, 0] == -1.0 and dense[firm0, 0] == 1.0
    # firm 0 buys capital goods from firm 1
    assert dense[firm0, 5] == -1.0 and dense[firm1, 5] == 1.0
    # firm 0 pays household 0's wage
    assert dense[firm0, 6] == -1.0 and dense[h0, 6] == 1.0
    # firm 0 pays loan interest to the bank
    assert dense[firm0, 9] == -1.0 and dense[bank, 9] == 1.0
    # the bank pays deposit interest to household 2
    assert dense[bank, 12] == -1.0 and dense[h2, 12] == 1.0


def test_augmentation_pins_each_household_spending_level() -> None:
    base = assemble(_tiny_topology())
    system = augment_alpha0(base, alpha0=2.5)
    assert system.shape == (9, 13)
    assert system.alpha0 == 2.5
    assert_array_equal(system.b, np.array([0.0] * 6 + [2.5] * 3))
    dense = system.A.toarray()
    assert_array_equal(dense[:6], base.A.toarray())
    expected_rows = np.zeros((3, 13))
    expected_rows[0, [0, 2]] = 1.0
    expected_rows[1, [1, 3]] = 1.0
    expected_rows[2, 4] = 1.0
    assert_array_equal(dense[6:], expected_rows)
    with pytest.raises(ValueError, match="already augmented"):
        augment_alpha0(system)


def test_household_without_consumption_edges_is_rejected() -> None:
    topology = _tiny_topology(consumption=[(0, 0), (1, 0), (1, 1)])
    base = assemble(topology)
    with pytest.raises(InfeasibleError, match="household 2"):
        augment_alpha0(base)


def test_topology_without_edges_is_rejected() -> None:
    empty = MultilayerTopology(nb=1, nf=2, nh=3, layers={
        kind: _layer(kind, (2, 2), []) for kind in LAYER_ORDER})
    with pytest.raises(InfeasibleError, match="no edges"):
        assemble(empty)


def test_base_density_is_two_over_the_row_count() -> None:
    system = assemble(_tiny_topology())
    assert density(system) == pytest.approx(2.0 / 6.0)


def test_complete_topology_matches_the_closed_form_column_count() -> None:
    nb, nf, nh = 3, 100, 1000
    hf = np.argwhere(np.ones((nh, nf), dtype=bool))
    ff = np.argwhere(~np.eye(nf, dtype=bool))
    fb = np.argwhere(np.ones((nf, nb), dtype=bool))
    hb = np.argwhere(np.ones((nh, nb), dtype=bool))
    topology = MultilayerTopology(nb=nb, nf=nf, nh=nh, layers={
        LayerKind.CONSUMPTION: SampledLayer(LayerKind.CONSUMPTION, (nh, nf), hf),
        LayerKind.INVESTMENT: SampledLayer(LayerKind.INVESTMENT, (nf, nf), ff),
        LayerKind.WAGES: SampledLayer(LayerKind.WAGES, (nh, nf), hf),
        LayerKind.LOAN_INTEREST: SampledLayer(LayerKind.LOAN_INTEREST, (nf, nb), fb),
        LayerKind.DEPOSIT_INTEREST: SampledLayer(LayerKind.DEPOSIT_INTEREST,
                                                 (nh, nb), hb),
    })
    expected_cols = 2 * nf * nh + nf * (nf - 1) + nb * (nf + nh)
    assert expected_cols == 213_200
    system = assemble(topology)
    assert system.shape == (1103, expected_cols)
    assert system.A.nnz == 2 * expected_cols
    assert density(system) == pytest.approx(2.0 / 1103.0)


def test_sampled_systems_conserve_every_column(small_prepared,
                                               small_config) -> None:
    for trial in range(3):
        topology = sample_topology(small_prepared.models, small_config.nb,
                                   small_config.nf, small_config.nh,
                                   small_config.seed, trial=trial)
        system = assemble(topology)
        sums = np.asarray(system.A.sum(axis=0)).ravel()
        assert_array_equal(sums, np.zeros(system.shape[1]))
        assert np.abs(system.A).sum() == 2 * system.shape[1]


def test_column_index_round_trips_every_column(small_trial) -> None:
    _, system = small_trial
    index = system.index
    for c in range(index.n_cols):
        kind, origin, dest = index.pair_of(c)
        assert index.column_of(kind, origin, dest) == c


def test_agent_rows_invert_cleanly() -> None:
    counts = (2, 3, 4)
    seen = []
    for agent_class, n in ((AgentClass.BANK, 2), (AgentClass.FIRM, 3),
                           (AgentClass.HOUSEHOLD, 4)):
        for idx in range(n):
            row = agent_row(counts, agent_class, idx)
            assert agent_of_row(counts, row) == (agent_class, idx)
            seen.append(row)
    assert seen == list(range(9))
    with pytest.raises(KeyError):
        agent_of_row(counts, 9)


def test_topology_sampling_is_deterministic_per_trial(small_prepared,
                                                      small_config) -> None:
    draw = lambda trial: sample_topology(  # noqa: E731
        small_prepared.models, small_config.nb, small_config.nf,
        small_config.nh, small_config.seed, trial=trial)
    first, again, other = draw(0), draw(0), draw(1)
    for kind in LAYER_ORDER:
        assert_array_equal(first.layers[kind].edges, again.layers[kind].edges)
    assert any(
        first.layers[kind].edges.shape != other.layers[kind].edges.shape
        or not np.array_equal(first.layers[kind].edges, other.layers[kind].edges)
        for kind in LAYER_ORDER)


def test_written_systems_read_back_identically(small_trial, tmp_path) -> None:
    _, system = small_trial
    write_system(system, tmp_path / "sys")
    restored = read_system(tmp_path / "sys")
    assert restored.counts == system.counts
    assert restored.alpha0 == system.alpha0
    assert_array_equal(restored.b, system.b)
    assert (restored.A != system.A).nnz == 0
    assert [restored.index.pair_of(c) for c in range(restored.index.n_cols)] \
        == [system.index.pair_of(c) for c in range(system.index.n_cols)]

    write_system(restored, tmp_path / "sys2")
    for name in ("triplets.csv", "rhs.csv", "index.json"):
        first = (tmp_path / "sys" / name).read_bytes()
        second = (tmp_path / "sys2" / name).read_bytes()
        assert first == second
