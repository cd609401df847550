"""Run configuration: validation, hashing and (de)serialization.

A :class:`RunConfig` pins down everything that determines a run's output:
input locations, population sizes, ensemble choices, degree targets, the
master seed and the solver.  Its hash covers exactly the fields that affect
results, so reruns of the same setup land in the same output files while a
changed thread count or output path does not.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .ensembles import MODEL_TYPES, RFITNESS, DegreeTargets
from .errors import ConfigError, DataError
from .ingest import ACCOUNT_FILES, default_sector_config

SOLVERS = ("nnls", "lsq", "bayes", "dcgm")

_TARGET_KEYS = {
    "k_cons": "consumption",
    "k_wage": "wages",
    "k_inv": "investment",
    "k_loans": "loan_interest",
    "k_dep": "deposit_interest",
}


@dataclass(frozen=True)
class RunConfig:
    """Full description of one reconstruction run."""

    data_dir: str = "."
    out_dir: str = "out"
    sector_config: str | None = None
    include_agriculture: bool = False
    nb: int = 3
    nf: int = 100
    nh: int = 1000
    model: str = RFITNESS
    alpha0: float = 1.0
    targets: DegreeTargets = field(default_factory=DegreeTargets)
    seed: int = 0
    trials: int = 1
    solver: str = "nnls"
    sigma: float = 1.0
    threads: int | None = None

    def validate(self) -> None:
        """Raise :class:`ConfigError` on any out-of-range or unknown setting."""
        for name, value in (("nb", self.nb), ("nf", self.nf), ("nh", self.nh)):
            if value < 1:
                raise ConfigError(f"{name} must be at least 1, got {value}")
        if self.model not in MODEL_TYPES:
            raise ConfigError(
                f"unknown model {self.model!r}; expected one of {MODEL_TYPES}")
        if self.solver not in SOLVERS:
            raise ConfigError(
                f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if not self.alpha0 > 0:
            raise ConfigError(f"alpha0 must be positive, got {self.alpha0}")
        for flag, name in _TARGET_KEYS.items():
            value = getattr(self.targets, name)
            if not value > 0:
                raise ConfigError(f"{flag} must be positive, got {value}")
        if self.targets.loan_interest >= self.nb:
            raise ConfigError(
                f"k_loans={self.targets.loan_interest} needs more than "
                f"{self.nb} banks to stay below link probability 1")
        if self.targets.deposit_interest >= self.nb:
            raise ConfigError(
                f"k_dep={self.targets.deposit_interest} needs more than "
                f"{self.nb} banks to stay below link probability 1")
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")

    def sector_table(self) -> dict[str, str | None]:
        """The sector mapping in effect: from file if given, built-in otherwise."""
        if self.sector_config is None:
            return default_sector_config(self.include_agriculture)
        with open(self.sector_config) as fh:
            table = json.load(fh)
        if not isinstance(table, dict):
            raise ConfigError(
                f"{self.sector_config}: sector config must be a JSON object")
        return {str(k): (None if v is None else str(v)) for k, v in table.items()}

    def accounts_digest(self) -> str:
        """Hash of the account tables' raw bytes.

        Keyed by file name and content so that runs against different
        accounts never share a fitted bundle or an output directory.
        """
        digest = hashlib.sha256()
        for name in ACCOUNT_FILES:
            path = Path(self.data_dir) / name
            if not path.is_file():
                raise DataError(f"missing input table: {path}")
            digest.update(name.encode())
            digest.update(path.read_bytes())
        return digest.hexdigest()[:12]

    def worker_count(self) -> int:
        if self.threads is not None:
            return self.threads
        return os.cpu_count() or 1

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def semantic_fields(self) -> dict[str, Any]:
        """The fields that affect computed results, as a flat dict.

        Output paths and thread counts are deliberately absent: they change
        where results go and how fast they arrive, not what they are.  The
        sector mapping and the account tables enter by content, not by path.
        """
        fields: dict[str, Any] = {
            "sector_table": self.sector_table(),
            "accounts": self.accounts_digest(),
            "nb": self.nb, "nf": self.nf, "nh": self.nh,
            "model": self.model,
            "alpha0": self.alpha0,
            "seed": self.seed,
            "trials": self.trials,
            "solver": self.solver,
            "sigma": self.sigma,
        }
        for flag, name in _TARGET_KEYS.items():
            fields[flag] = getattr(self.targets, name)
        return fields

    def config_hash(self) -> str:
        """Twelve hex digits identifying the semantic configuration."""
        blob = json.dumps(self.semantic_fields(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def model_hash(self) -> str:
        """Hash of the fields that determine the fitted ensembles only.

        Runs that differ in solver, trial count, alpha0 or sigma share the
        same layer models, so they can share one fitted bundle on disk.
        """
        keep = ("sector_table", "accounts", "nb", "nf", "nh", "model", "seed",
                *_TARGET_KEYS)
        fields = self.semantic_fields()
        blob = json.dumps({k: fields[k] for k in keep}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "sector_config": self.sector_config,
            "include_agriculture": self.include_agriculture,
            "nb": self.nb, "nf": self.nf, "nh": self.nh,
            "model": self.model,
            "alpha0": self.alpha0,
            "seed": self.seed,
            "trials": self.trials,
            "solver": self.solver,
            "sigma": self.sigma,
            "threads": self.threads,
        }
        for flag, name in _TARGET_KEYS.items():
            out[flag] = getattr(self.targets, name)
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        """Build a config from a flat dict, rejecting unknown keys."""
        known = {f.name for f in dataclasses.fields(cls)} - {"targets"}
        unknown = set(raw) - known - set(_TARGET_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        targets = DegreeTargets(**{
            name: float(raw[flag])
            for flag, name in _TARGET_KEYS.items() if flag in raw})
        kwargs = {k: v for k, v in raw.items() if k in known}
        try:
            return cls(targets=targets, **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None = None,
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a JSON config file and apply overrides on top.

    Either part may be absent: no file means all defaults, and overrides
    with ``None`` values are treated as not given.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(raw)
