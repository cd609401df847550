"""Load sector-level accounts and derive the quantities the ensembles need.

The input is four CSV tables in one directory, all in long format:

========================  =========================================  ==========================================
file                      columns                                    content
========================  =========================================  ==========================================
``supply.csv``            ``product,sector,value``                   output of each product by each sector
``use_final.csv``         ``product,value``                          final household consumption by product
``io.csv``                ``seller_sector,buyer_sector,value``       intermediate transactions between sectors
``demography.csv``        ``sector,firm_count,employee_count``       business counts and employment by sector
========================  =========================================  ==========================================

Raw sector codes are mapped through an aggregation table before anything
else happens: a code mapped to a group label is accumulated into that group,
a code mapped to ``None`` is dropped, and a code missing from the table is an
error.  The default table folds NACE section codes onto the usual coarse
groups and drops agriculture.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SUPPLY_FILE = "supply.csv"
USE_FINAL_FILE = "use_final.csv"
IO_FILE = "io.csv"
DEMOGRAPHY_FILE = "demography.csv"
ACCOUNT_FILES = (SUPPLY_FILE, USE_FINAL_FILE, IO_FILE, DEMOGRAPHY_FILE)

# NACE sections onto the coarse groups used for business statistics.
# Agriculture (A), household employers (T) and extraterritorial bodies (U)
# have no usable firm demography and are dropped unless asked for.
_NACE_GROUPS: dict[str, str | None] = {
    "A": None,
    "B": "B-E", "C": "B-E", "D": "B-E", "E": "B-E",
    "F": "F",
    "G": "G-I", "H": "G-I", "I": "G-I",
    "J": "J",
    "K": "K",
    "L": "L",
    "M": "M-N", "N": "M-N",
    "O": "O-Q", "P": "O-Q", "Q": "O-Q",
    "R": "R-S", "S": "R-S",
    "T": None,
    "U": None,
}


def default_sector_config(include_agriculture: bool = False) -> dict[str, str | None]:
    """Return the default NACE section aggregation table."""
    table = dict(_NACE_GROUPS)
    if include_agriculture:
        table["A"] = "A"
    return table


@dataclass(frozen=True)
class SectorDataset:
    """Aggregated accounts on a common sector axis.

    ``supply`` is products by sectors, ``io`` is sectors by sectors with the
    selling sector on the rows.  ``use_final`` follows the product axis of
    ``supply``.
    """

    sectors: tuple[str, ...]
    products: tuple[str, ...]
    supply: np.ndarray
    use_final: np.ndarray
    io: np.ndarray
    firm_count: np.ndarray
    employee_count: np.ndarray

    @property
    def n_sectors(self) -> int:
        return len(self.sectors)


@dataclass(frozen=True)
class FitnessSet:
    """Node and dyad propensities feeding the link ensembles.

    ``dyad[s, t]`` is the propensity of sector ``s`` to sell capital goods to
    sector ``t`` and sums to one over all pairs.  ``x_cons`` and ``x_wage``
    are per-sector weights summing to one.  ``a`` holds one idiosyncratic
    activity level per firm, uniform on [0, 1).
    """

    dyad: np.ndarray
    x_cons: np.ndarray
    x_wage: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class AgentRegistry:
    """Concrete agent populations with their sector assignments."""

    nb: int
    nf: int
    nh: int
    sectors: tuple[str, ...]
    firm_sector: np.ndarray
    household_sector: np.ndarray

    def firms_per_sector(self) -> np.ndarray:
        return np.bincount(self.firm_sector, minlength=len(self.sectors))

    def households_per_sector(self) -> np.ndarray:
        return np.bincount(self.household_sector, minlength=len(self.sectors))


def _read_rows(path: Path, columns: tuple[str, ...]) -> list[dict[str, str]]:
    if not path.is_file():
        raise DataError(f"missing input table: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path.name}: missing columns {missing}, found {header}")
        return list(reader)


def _parse_value(raw: str, path_name: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError as exc:
        raise DataError(f"{path_name}, row {line}: not a number: {raw!r}") from exc
    if not np.isfinite(value):
        raise DataError(f"{path_name}, row {line}: non-finite value {raw!r}")
    if value < 0:
        raise DataError(f"{path_name}, row {line}: negative value {value}")
    return value


def _map_sector(code: str, table: dict[str, str | None], path_name: str) -> str | None:
    code = code.strip()
    if code not in table:
        raise DataError(f"{path_name}: unknown sector code {code!r}")
    return table[code]


def load_dataset(data_dir: str | Path,
                 sector_config: dict[str, str | None] | None = None) -> SectorDataset:
    """Read and aggregate the four account tables under ``data_dir``.

    Values for raw sectors that map to the same group are summed.  Every
    table must cover exactly the same set of groups after aggregation.
    """
    data_dir = Path(data_dir)
    table = dict(sector_config) if sector_config is not None else default_sector_config()

    supply_rows = _read_rows(data_dir / SUPPLY_FILE, ("product", "sector", "value"))
    use_rows = _read_rows(data_dir / USE_FINAL_FILE, ("product", "value"))
    io_rows = _read_rows(data_dir / IO_FILE, ("seller_sector", "buyer_sector", "value"))
    demo_rows = _read_rows(data_dir / DEMOGRAPHY_FILE,
                           ("sector", "firm_count", "employee_count"))

    products: list[str] = []
    supply_acc: dict[tuple[str, str], float] = {}
    supply_groups: set[str] = set()
    for i, row in enumerate(supply_rows, start=2):
        group = _map_sector(row["sector"], table, SUPPLY_FILE)
        product = row["product"].strip()
        if product not in products:
            products.append(product)
        if group is None:
            continue
        supply_groups.add(group)
        value = _parse_value(row["value"], SUPPLY_FILE, i)
        supply_acc[product, group] = supply_acc.get((product, group), 0.0) + value

    use_acc: dict[str, float] = {}
    for i, row in enumerate(use_rows, start=2):
        product = row["product"].strip()
        value = _parse_value(row["value"], USE_FINAL_FILE, i)
        use_acc[product] = use_acc.get(product, 0.0) + value
    if set(use_acc) != set(products):
        raise DataError(
            f"{USE_FINAL_FILE}: product axis does not match {SUPPLY_FILE}: "
            f"{sorted(set(use_acc) ^ set(products))}")

    io_acc: dict[tuple[str, str], float] = {}
    io_groups: set[str] = set()
    for i, row in enumerate(io_rows, start=2):
        seller = _map_sector(row["seller_sector"], table, IO_FILE)
        buyer = _map_sector(row["buyer_sector"], table, IO_FILE)
        value = _parse_value(row["value"], IO_FILE, i)
        if seller is None or buyer is None:
            continue
        io_groups.update((seller, buyer))
        io_acc[seller, buyer] = io_acc.get((seller, buyer), 0.0) + value

    firm_acc: dict[str, float] = {}
    emp_acc: dict[str, float] = {}
    demo_groups: set[str] = set()
    for i, row in enumerate(demo_rows, start=2):
        group = _map_sector(row["sector"], table, DEMOGRAPHY_FILE)
        if group is None:
            continue
        demo_groups.add(group)
        firm_acc[group] = firm_acc.get(group, 0.0) + _parse_value(
            row["firm_count"], DEMOGRAPHY_FILE, i)
        emp_acc[group] = emp_acc.get(group, 0.0) + _parse_value(
            row["employee_count"], DEMOGRAPHY_FILE, i)

    if not (supply_groups == io_groups == demo_groups):
        raise DataError(
            "tables disagree on the aggregated sector axis: "
            f"supply={sorted(supply_groups)} io={sorted(io_groups)} "
            f"demography={sorted(demo_groups)}")
    if not supply_groups:
        raise DataError("no sectors left after aggregation")

    sectors = tuple(sorted(supply_groups))
    prods = tuple(products)
    sector_pos = {s: k for k, s in enumerate(sectors)}
    product_pos = {p: k for k, p in enumerate(prods)}

    supply = np.zeros((len(prods), len(sectors)))
    for (product, group), value in supply_acc.items():
        supply[product_pos[product], sector_pos[group]] = value
    use_final = np.array([use_acc[p] for p in prods])
    io = np.zeros((len(sectors), len(sectors)))
    for (seller, buyer), value in io_acc.items():
        io[sector_pos[seller], sector_pos[buyer]] = value
    firm_count = np.array([firm_acc[s] for s in sectors])
    employee_count = np.array([emp_acc[s] for s in sectors])

    logger.info("loaded %d sectors, %d products from %s",
                len(sectors), len(prods), data_dir)
    return SectorDataset(sectors=sectors, products=prods, supply=supply,
                         use_final=use_final, io=io, firm_count=firm_count,
                         employee_count=employee_count)


def compute_fitnesses(data: SectorDataset, n_firms: int,
                      rng: np.random.Generator) -> FitnessSet:
    """Derive the ensemble propensities from the aggregated accounts.

    The dyadic matrix is the intermediate-transaction table normalized to
    unit total mass.  The consumption weight of a sector is its supply of
    each product weighted by how much of that product households buy; the
    wage weight is its employee share.  One activity level per firm is drawn
    uniformly from [0, 1).
    """
    io_total = data.io.sum()
    if io_total <= 0:
        raise DataError("intermediate-transaction table is all zero")
    dyad = data.io / io_total

    cons_raw = (data.supply * data.use_final[:, None]).sum(axis=0)
    cons_total = cons_raw.sum()
    if cons_total <= 0:
        raise DataError("supply table weighted by final use is all zero")
    x_cons = cons_raw / cons_total

    emp_total = data.employee_count.sum()
    if emp_total <= 0:
        raise DataError("employee counts are all zero")
    x_wage = data.employee_count / emp_total

    if n_firms < 1:
        raise ConfigError(f"n_firms must be >= 1, got {n_firms}")
    a = rng.random(n_firms)
    return FitnessSet(dyad=dyad, x_cons=x_cons, x_wage=x_wage, a=a)


def apportion(counts: np.ndarray, total: int) -> np.ndarray:
    """Split ``total`` units in proportion to ``counts`` by largest remainder.

    Each share gets the floor of its exact quota, then the leftover units go
    to the largest fractional remainders, lowest index first on ties.  The
    result always sums to ``total`` exactly.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if (counts < 0).any() or counts.sum() <= 0:
        raise ValueError("counts must be nonnegative with a positive total")
    quota = total * counts / counts.sum()
    base = np.floor(quota).astype(np.int64)
    frac = quota - base
    leftover = int(total - base.sum())
    # stable argsort keeps the lowest index first among equal remainders
    order = np.argsort(-frac, kind="stable")
    base[order[:leftover]] += 1
    return base


def build_registry(data: SectorDataset, nb: int, nf: int, nh: int,
                   rng: np.random.Generator) -> AgentRegistry:
    """Instantiate the agent populations for one run.

    Firms are apportioned to sectors from the business counts with the
    largest-remainder rule and laid out in sector blocks, so the assignment
    is deterministic.  Households are assigned by a single multinomial draw
    with employee-share probabilities.
    """
    if min(nb, nf, nh) < 1:
        raise ConfigError(f"agent counts must be >= 1, got nb={nb} nf={nf} nh={nh}")
    if data.firm_count.sum() <= 0:
        raise DataError("firm counts are all zero")
    emp_total = data.employee_count.sum()
    if emp_total <= 0:
        raise DataError("employee counts are all zero")

    firms_per_sector = apportion(data.firm_count, nf)
    firm_sector = np.repeat(np.arange(data.n_sectors), firms_per_sector)

    household_counts = rng.multinomial(nh, data.employee_count / emp_total)
    household_sector = np.repeat(np.arange(data.n_sectors), household_counts)

    return AgentRegistry(nb=nb, nf=nf, nh=nh, sectors=data.sectors,
                         firm_sector=firm_sector, household_sector=household_sector)
