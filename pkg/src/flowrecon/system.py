"""Assemble the sparse balance system over a sampled multilayer topology.

Every sampled edge becomes one unknown flow.  Each agent contributes one
balance row stating that its inflows minus outflows vanish, so the matrix
has exactly one +1 (receiver) and one -1 (payer) per column.  Rows are laid
out banks first, then firms, then households.  Columns follow the canonical
layer order (consumption, investment, wages, loan interest, deposit
interest); within a layer they are destination-major with the origin index
varying fastest.

The homogeneous system only pins flows up to scale.  ``augment_alpha0``
appends one row per household forcing its total consumption spending to a
common level, which anchors the solution.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from . import seeding
from .errors import InfeasibleError
from .ensembles import (LAYER_ORDER, PAYS_FROM_ORIGIN, AgentClass, LayerKind,
                        LayerModel, SampledLayer, LAYER_SIDES, sample_layer)


@dataclass(frozen=True)
class MultilayerTopology:
    """One sampled graph per layer over a fixed agent population."""

    nb: int
    nf: int
    nh: int
    layers: dict[LayerKind, SampledLayer]

    def n_edges(self) -> int:
        return sum(layer.n_edges for layer in self.layers.values())


def sample_topology(models: dict[LayerKind, LayerModel], nb: int, nf: int, nh: int,
                    master_seed: int, trial: int = 0) -> MultilayerTopology:
    """Draw all five layers for one trial.

    Each layer consumes its own random substream keyed by (trial, layer), so
    topologies are reproducible per trial no matter how trials are scheduled.
    """
    layers = {}
    for pos, kind in enumerate(LAYER_ORDER):
        rng = seeding.substream(master_seed, seeding.LAYER_SAMPLING, trial, pos)
        layers[kind] = sample_layer(models[kind], rng)
    return MultilayerTopology(nb=nb, nf=nf, nh=nh, layers=layers)


class ColumnIndex:
    """Bijection between matrix columns and sampled edges.

    Layers appear in canonical order; within a layer, columns are sorted by
    destination and then origin, matching the layout of the stacked demand
    vector.
    """

    def __init__(self, topology: MultilayerTopology):
        kinds, origins, dests = [], [], []
        offsets: dict[LayerKind, tuple[int, int]] = {}
        start = 0
        for pos, kind in enumerate(LAYER_ORDER):
            layer = topology.layers[kind]
            edges = layer.edges
            if len(edges):
                order = np.lexsort((edges[:, 0], edges[:, 1]))
                edges = edges[order]
            origins.append(edges[:, 0] if len(edges) else np.empty(0, dtype=np.int64))
            dests.append(edges[:, 1] if len(edges) else np.empty(0, dtype=np.int64))
            kinds.append(np.full(len(edges), pos, dtype=np.int8))
            offsets[kind] = (start, start + len(edges))
            start += len(edges)
        self.origins = np.concatenate(origins)
        self.dests = np.concatenate(dests)
        self.kinds = np.concatenate(kinds)
        self.offsets = offsets
        self.shapes = {kind: topology.layers[kind].shape for kind in LAYER_ORDER}

    @property
    def n_cols(self) -> int:
        return len(self.origins)

    def layer_slice(self, kind: LayerKind) -> slice:
        lo, hi = self.offsets[kind]
        return slice(lo, hi)

    def column_of(self, kind: LayerKind, origin: int, destination: int) -> int:
        """Column id of one edge; raises ``KeyError`` if it was not sampled."""
        lo, hi = self.offsets[kind]
        n_origin = self.shapes[kind][0]
        keys = self.dests[lo:hi] * n_origin + self.origins[lo:hi]
        pos = int(np.searchsorted(keys, destination * n_origin + origin))
        if pos >= hi - lo or keys[pos] != destination * n_origin + origin:
            raise KeyError(f"no sampled {kind.value} edge ({origin}, {destination})")
        return lo + pos

    def pair_of(self, column: int) -> tuple[LayerKind, int, int]:
        if not 0 <= column < self.n_cols:
            raise KeyError(f"column {column} out of range")
        kind = LAYER_ORDER[self.kinds[column]]
        return kind, int(self.origins[column]), int(self.dests[column])


@dataclass(frozen=True)
class LinearSystem:
    """Sparse balance system ``A xi = b`` plus its column bookkeeping."""

    A: sparse.csc_matrix
    b: np.ndarray
    index: ColumnIndex
    counts: tuple[int, int, int]
    alpha0: float | None = None

    @property
    def n_base_rows(self) -> int:
        return sum(self.counts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape


def agent_row(counts: tuple[int, int, int], agent_class: AgentClass, idx: int) -> int:
    """Row of one agent's balance equation (banks, then firms, then households)."""
    nb, nf, _ = counts
    if agent_class is AgentClass.BANK:
        return idx
    if agent_class is AgentClass.FIRM:
        return nb + idx
    return nb + nf + idx


def agent_of_row(counts: tuple[int, int, int], row: int) -> tuple[AgentClass, int]:
    """Inverse of :func:`agent_row` for base rows."""
    nb, nf, nh = counts
    if row < nb:
        return AgentClass.BANK, row
    if row < nb + nf:
        return AgentClass.FIRM, row - nb
    if row < nb + nf + nh:
        return AgentClass.HOUSEHOLD, row - nb - nf
    raise KeyError(f"row {row} is not a balance row")


def _class_offset(counts: tuple[int, int, int], agent_class: AgentClass) -> int:
    nb, nf, _ = counts
    return {AgentClass.BANK: 0, AgentClass.FIRM: nb,
            AgentClass.HOUSEHOLD: nb + nf}[agent_class]


def edge_rows(index: ColumnIndex, counts: tuple[int, int, int],
              kind: LayerKind) -> tuple[np.ndarray, np.ndarray]:
    """Payer and receiver balance rows for one layer's columns."""
    sl = index.layer_slice(kind)
    origin_class, dest_class = LAYER_SIDES[kind]
    origin_rows = index.origins[sl] + _class_offset(counts, origin_class)
    dest_rows = index.dests[sl] + _class_offset(counts, dest_class)
    if PAYS_FROM_ORIGIN[kind]:
        return origin_rows, dest_rows
    return dest_rows, origin_rows


def assemble(topology: MultilayerTopology) -> LinearSystem:
    """Build the homogeneous balance system for one sampled topology.

    Each column carries -1 on the payer's row and +1 on the receiver's row;
    the right-hand side is zero.
    """
    if topology.n_edges() == 0:
        raise InfeasibleError("topology has no edges; nothing to balance")
    index = ColumnIndex(topology)
    counts = (topology.nb, topology.nf, topology.nh)
    n_rows = sum(counts)
    cols = np.arange(index.n_cols)

    payer_rows = np.empty(index.n_cols, dtype=np.int64)
    receiver_rows = np.empty(index.n_cols, dtype=np.int64)
    for kind in LAYER_ORDER:
        sl = index.layer_slice(kind)
        payer_rows[sl], receiver_rows[sl] = edge_rows(index, counts, kind)

    rows = np.concatenate([payer_rows, receiver_rows])
    data = np.concatenate([np.full(index.n_cols, -1.0), np.ones(index.n_cols)])
    A = sparse.coo_matrix((data, (rows, np.concatenate([cols, cols]))),
                          shape=(n_rows, index.n_cols)).tocsc()
    return LinearSystem(A=A, b=np.zeros(n_rows), index=index, counts=counts)


def augment_alpha0(system: LinearSystem, alpha0: float = 1.0) -> LinearSystem:
    """Append one row per household pinning its total consumption spending.

    Each new row has +1 in every consumption column of that household and
    ``alpha0`` on the right-hand side.  A household with no consumption edge
    would make its row unsatisfiable, so that is rejected up front.
    """
    if system.alpha0 is not None:
        raise ValueError("system is already augmented")
    nb, nf, nh = system.counts
    index = system.index
    sl = index.layer_slice(LayerKind.CONSUMPTION)
    households = index.origins[sl]
    per_household = np.bincount(households, minlength=nh)
    if (per_household == 0).any():
        missing = int(np.argmin(per_household))
        raise InfeasibleError(
            f"household {missing} has no consumption edge; "
            f"its spending row cannot be satisfied")

    cols = np.arange(sl.start, sl.stop)
    extra = sparse.coo_matrix((np.ones(len(cols)), (households, cols)),
                              shape=(nh, index.n_cols))
    A = sparse.vstack([system.A, extra]).tocsc()
    b = np.concatenate([system.b, np.full(nh, float(alpha0))])
    return LinearSystem(A=A, b=b, index=index, counts=system.counts,
                        alpha0=float(alpha0))


def density(system: LinearSystem) -> float:
    """Fraction of nonzero entries in the system matrix."""
    n_rows, n_cols = system.shape
    return system.A.nnz / (n_rows * n_cols)


def write_system(system: LinearSystem, out_dir: str | Path) -> None:
    """Write the system as triplets plus column bookkeeping.

    ``triplets.csv`` holds ``row,col,value`` for every nonzero, ``rhs.csv``
    the right-hand side, and ``index.json`` the column-to-edge map together
    with the agent counts and the augmentation level.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    coo = system.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(out_dir / "triplets.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            writer.writerow([int(r), int(c), repr(float(v))])
    with open(out_dir / "rhs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "value"])
        for r, v in enumerate(system.b):
            writer.writerow([r, repr(float(v))])
    index = system.index
    payload = {
        "counts": list(system.counts),
        "alpha0": system.alpha0,
        "columns": [[LAYER_ORDER[k].value, int(o), int(d)]
                    for k, o, d in zip(index.kinds, index.origins, index.dests)],
        "shapes": {kind.value: list(index.shapes[kind]) for kind in LAYER_ORDER},
    }
    with open(out_dir / "index.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_system(in_dir: str | Path) -> LinearSystem:
    """Rebuild a system written by :func:`write_system`."""
    in_dir = Path(in_dir)
    with open(in_dir / "index.json") as fh:
        payload = json.load(fh)
    counts = tuple(payload["counts"])
    shapes = {LayerKind(k): tuple(v) for k, v in payload["shapes"].items()}
    edges_by_kind: dict[LayerKind, list[list[int]]] = {k: [] for k in LAYER_ORDER}
    for kind_value, origin, dest in payload["columns"]:
        edges_by_kind[LayerKind(kind_value)].append([origin, dest])
    layers = {
        kind: SampledLayer(kind=kind, shape=shapes[kind],
                           edges=np.array(edges, dtype=np.int64).reshape(-1, 2))
        for kind, edges in edges_by_kind.items()
    }
    topology = MultilayerTopology(nb=counts[0], nf=counts[1], nh=counts[2],
                                  layers=layers)
    index = ColumnIndex(topology)

    rows, cols, values = [], [], []
    with open(in_dir / "triplets.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(int(row["row"]))
            cols.append(int(row["col"]))
            values.append(float(row["value"]))
    b_rows = []
    with open(in_dir / "rhs.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            b_rows.append(float(row["value"]))
    b = np.array(b_rows)
    A = sparse.coo_matrix((values, (rows, cols)),
                          shape=(len(b), index.n_cols)).tocsc()
    return LinearSystem(A=A, b=b, index=index, counts=counts,
                        alpha0=payload["alpha0"])
