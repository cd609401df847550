from __future__ import annotations

import json
from pathlib import Path

import pytest

from flowrecon.config import RunConfig
from flowrecon.ensembles import DegreeTargets
from flowrecon.ingest import SectorDataset, load_dataset
from flowrecon.metrics import PreparedRun, prepare_models, sample_trial_system
from flowrecon.system import LinearSystem, MultilayerTopology

DATA_DIR = Path(__file__).parent / "data" / "threesector"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def identity_sectors() -> dict[str, str]:
    with open(DATA_DIR / "sectors.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def dataset(identity_sectors: dict[str, str]) -> SectorDataset:
    return load_dataset(DATA_DIR, identity_sectors)


def small_run_config(**overrides) -> RunConfig:
    """A cheap three-sector setup: 3 banks, 12 firms, 40 households.

    Degree targets are scaled down so that every layer stays fittable at
    this size (the defaults assume hundreds of firms).
    """
    base = dict(
        data_dir=str(DATA_DIR),
        sector_config=str(DATA_DIR / "sectors.json"),
        nb=3, nf=12, nh=40,
        seed=7,
        targets=DegreeTargets(consumption=6.0, wages=1.0, investment=3.0,
                              loan_interest=1.0, deposit_interest=2.0),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def small_config() -> RunConfig:
    return small_run_config()


@pytest.fixture(scope="session")
def small_prepared(small_config: RunConfig) -> PreparedRun:
    return prepare_models(small_config)


@pytest.fixture(scope="session")
def small_trial(small_prepared: PreparedRun,
                small_config: RunConfig) -> tuple[MultilayerTopology, LinearSystem]:
    """One sampled topology with its augmented balance system."""
    return sample_trial_system(small_prepared, small_config, trial=0)
