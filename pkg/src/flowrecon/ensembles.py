"""Bernoulli link ensembles for the five transaction layers.

Each layer is an independent-link random graph over one pair of agent
populations.  Fitness-driven layers put probability ``z*g/(1 + z*g)`` on a
pair with factor ``g``, with ``z`` calibrated so the expected link count hits
a target; uniform layers fix the probability directly from a mean-degree
target.  Two model variants are supported: ``block``, where factors depend
on sectors only, and ``rfitness``, where an idiosyncratic per-firm activity
level multiplies in.

Pairs are always indexed ``(origin, destination)``.  The origin side is the
one whose index varies fastest in the demand-vector layout downstream:
households for consumption, wages and deposit interest; the buying firm for
investment; the firm for loan interest.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import FitError
from .ingest import AgentRegistry, FitnessSet

FIT_TOL_REL = 1e-8
FIT_MAX_ITER = 200

BLOCK = "block"
RFITNESS = "rfitness"
MODEL_TYPES = (BLOCK, RFITNESS)


class AgentClass(enum.Enum):
    BANK = "bank"
    FIRM = "firm"
    HOUSEHOLD = "household"


class LayerKind(enum.Enum):
    """The five transaction layers, in canonical column order."""

    CONSUMPTION = "consumption"
    INVESTMENT = "investment"
    WAGES = "wages"
    LOAN_INTEREST = "loan_interest"
    DEPOSIT_INTEREST = "deposit_interest"


LAYER_ORDER: tuple[LayerKind, ...] = tuple(LayerKind)

# (origin class, destination class) per layer.
LAYER_SIDES: dict[LayerKind, tuple[AgentClass, AgentClass]] = {
    LayerKind.CONSUMPTION: (AgentClass.HOUSEHOLD, AgentClass.FIRM),
    LayerKind.INVESTMENT: (AgentClass.FIRM, AgentClass.FIRM),
    LayerKind.WAGES: (AgentClass.HOUSEHOLD, AgentClass.FIRM),
    LayerKind.LOAN_INTEREST: (AgentClass.FIRM, AgentClass.BANK),
    LayerKind.DEPOSIT_INTEREST: (AgentClass.HOUSEHOLD, AgentClass.BANK),
}

# Which end of an edge pays the flow it carries.  Consumption, investment
# and loan interest are paid by the origin node; wages and deposit interest
# flow to the origin node.
PAYS_FROM_ORIGIN: dict[LayerKind, bool] = {
    LayerKind.CONSUMPTION: True,
    LayerKind.INVESTMENT: True,
    LayerKind.WAGES: False,
    LayerKind.LOAN_INTEREST: True,
    LayerKind.DEPOSIT_INTEREST: False,
}


@dataclass(frozen=True)
class DegreeTargets:
    """Mean-degree targets per layer, one per constrained side.

    Consumption counts suppliers per household, wages jobs per household,
    investment suppliers per firm, loan interest lender relations per firm
    and deposit interest bank relations per household.  The deposit target
    is set close to the bank count so that almost every household holds at
    least one interest-bearing account; with sparser deposit networks a
    sizable share of households would have no income channel at all and the
    balance system could not be satisfied.
    """

    consumption: float = 20.0
    wages: float = 1.0
    investment: float = 5.0
    loan_interest: float = 1.0
    deposit_interest: float = 2.9

    def for_kind(self, kind: LayerKind) -> float:
        return float(getattr(self, kind.value))


@dataclass(frozen=True)
class LayerModel:
    """A fitted link ensemble for one layer.

    ``probs`` holds the pair probabilities, origins on the rows.  ``z`` is
    the fitted density parameter for fitness-driven layers and ``None`` for
    uniform ones.  ``admissible`` counts the pairs that can carry a link.
    """

    kind: LayerKind
    model: str
    probs: np.ndarray
    z: float | None
    target_links: float
    admissible: int
    fitness_ref: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def expected_links(self) -> float:
        return float(self.probs.sum())

    def to_dict(self) -> dict:
        """JSON-ready summary; probabilities are rebuilt, not stored."""
        return {
            "kind": self.kind.value,
            "model": self.model,
            "z": self.z,
            "target_links": self.target_links,
            "admissible": self.admissible,
            "fitness_ref": list(self.fitness_ref),
        }


@dataclass(frozen=True)
class SampledLayer:
    """One Bernoulli draw from a layer model.

    ``edges`` has one ``(origin, destination)`` row per link, in row-major
    order of the probability matrix.
    """

    kind: LayerKind
    shape: tuple[int, int]
    edges: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _link_probabilities(z: float, factors: np.ndarray) -> np.ndarray:
    # 1 - 1/(1+t) instead of t/(1+t): stays exact for t = 0 and saturates
    # cleanly to 1.0 when z*g overflows.
    with np.errstate(over="ignore"):
        t = z * factors
        return 1.0 - 1.0 / (1.0 + t)


def expected_link_count(z: float, factors: np.ndarray) -> float:
    """Expected number of links at density ``z`` over the given pair factors."""
    return float(_link_probabilities(z, np.asarray(factors, dtype=float)).sum())


def fit_z(factors: np.ndarray, target: float, *,
          tol_rel: float = FIT_TOL_REL, max_iter: int = FIT_MAX_ITER) -> float:
    """Calibrate the density parameter so expected links hit ``target``.

    The expected count is strictly increasing in ``z`` from 0 toward the
    number of pairs with a positive factor, so the root is unique.  The
    bracket is grown by doubling and then bisected until the expected count
    is within ``tol_rel * target`` of the target.

    Pairs with zero factor can never link and simply do not count; a target
    at or above the number of linkable pairs is unattainable.
    """
    g = np.asarray(factors, dtype=float).ravel()
    if (g < 0).any():
        raise FitError("pair factors must be nonnegative")
    g = g[g > 0]
    if g.size == 0:
        raise FitError("no pair has a positive factor")
    if target <= 0:
        raise FitError(f"target link count must be positive, got {target}")
    if target >= g.size:
        raise FitError(
            f"target link count {target} is unattainable over {g.size} linkable pairs")

    tol = tol_rel * target
    lo, hi = 0.0, 1.0
    while expected_link_count(hi, g) < target:
        hi *= 2.0
        if not np.isfinite(hi):
            raise FitError("failed to bracket the density parameter")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        value = expected_link_count(mid, g)
        if abs(value - target) <= tol:
            return mid
        if value < target:
            lo = mid
        else:
            hi = mid
    raise FitError(
        f"density fit did not reach tolerance {tol:g} in {max_iter} iterations")


def _pair_factors(kind: LayerKind, model: str, fitnesses: FitnessSet,
                  registry: AgentRegistry) -> tuple[np.ndarray, tuple[str, ...]]:
    """Pair-factor matrix (origins on rows) for a fitness-driven layer."""
    fsec = registry.firm_sector
    if kind is LayerKind.CONSUMPTION:
        # households buy according to the selling firm's sector weight
        row = fitnesses.x_cons[fsec]
        return np.tile(row, (registry.nh, 1)), ("x_cons",)
    if kind is LayerKind.INVESTMENT:
        # dyad[s, t] is seller-to-buyer; origins here are the buyers
        factors = fitnesses.dyad[np.ix_(fsec, fsec)].T.copy()
        ref = ("dyad",)
        if model == RFITNESS:
            factors *= np.outer(fitnesses.a, fitnesses.a)
            ref = ("dyad", "a")
        np.fill_diagonal(factors, 0.0)
        return factors, ref
    if kind is LayerKind.WAGES and model == RFITNESS:
        row = fitnesses.a * fitnesses.x_wage[fsec]
        return np.tile(row, (registry.nh, 1)), ("x_wage", "a")
    raise ValueError(f"{kind} with model {model!r} is not fitness-driven")


def build_layer(kind: LayerKind, fitnesses: FitnessSet, registry: AgentRegistry,
                targets: DegreeTargets, model: str = BLOCK) -> LayerModel:
    """Calibrate one layer's link ensemble.

    Consumption and investment are fitness-driven in both model variants;
    wages are uniform within each sector in the ``block`` variant and
    fitness-driven in ``rfitness``.  Interest layers are uniform: every
    admissible pair links with the same probability, chosen so the mean
    degree of the constrained side (firms for loans, households for
    deposits) hits its target.
    """
    if model not in MODEL_TYPES:
        raise FitError(f"unknown model type {model!r}; expected one of {MODEL_TYPES}")
    k_target = targets.for_kind(kind)
    if k_target <= 0:
        raise FitError(f"degree target for {kind.value} must be positive")

    nb, nf, nh = registry.nb, registry.nf, registry.nh

    if kind is LayerKind.LOAN_INTEREST or kind is LayerKind.DEPOSIT_INTEREST:
        n_origin = nf if kind is LayerKind.LOAN_INTEREST else nh
        p = k_target / nb
        if p >= 1.0:
            raise FitError(
                f"{kind.value}: uniform link probability {p:g} is not below 1 "
                f"(degree target {k_target} with {nb} banks)")
        probs = np.full((n_origin, nb), p)
        return LayerModel(kind=kind, model=model, probs=probs, z=None,
                          target_links=k_target * n_origin,
                          admissible=n_origin * nb, fitness_ref=())

    if kind is LayerKind.WAGES and model == BLOCK:
        firms_by_sector = registry.firms_per_sector()
        nf_s = firms_by_sector[registry.firm_sector].astype(float)
        with np.errstate(divide="ignore"):
            p_col = np.where(nf_s > 0, k_target / nf_s, 0.0)
        if (p_col >= 1.0).any():
            bad = int(registry.firm_sector[np.argmax(p_col)])
            raise FitError(
                f"wages: within-sector link probability reaches 1 in sector "
                f"{registry.sectors[bad]!r} ({firms_by_sector[bad]} firms, "
                f"degree target {k_target})")
        same = registry.household_sector[:, None] == registry.firm_sector[None, :]
        probs = np.where(same, p_col[None, :], 0.0)
        return LayerModel(kind=kind, model=model, probs=probs, z=None,
                          target_links=float(probs.sum()),
                          admissible=int(same.sum()), fitness_ref=("sector",))

    factors, ref = _pair_factors(kind, model, fitnesses, registry)
    constrained = nf if kind is LayerKind.INVESTMENT else nh
    target_links = k_target * constrained
    z = fit_z(factors, target_links)
    probs = _link_probabilities(z, factors)
    return LayerModel(kind=kind, model=model, probs=probs, z=z,
                      target_links=target_links,
                      admissible=int(np.count_nonzero(factors)),
                      fitness_ref=ref)


def build_all_layers(fitnesses: FitnessSet, registry: AgentRegistry,
                     targets: DegreeTargets,
                     model: str = BLOCK) -> dict[LayerKind, LayerModel]:
    """Calibrate all five layers with one model variant."""
    return {kind: build_layer(kind, fitnesses, registry, targets, model)
            for kind in LAYER_ORDER}


def layer_from_dict(payload: dict, fitnesses: FitnessSet, registry: AgentRegistry,
                    targets: DegreeTargets) -> LayerModel:
    """Rebuild a layer model from its JSON summary.

    Probability matrices are reconstructed from the stored density parameter
    and the fitness data rather than refitted, so a stored bundle reproduces
    the exact ensemble it was written from.
    """
    kind = LayerKind(payload["kind"])
    model = payload["model"]
    z = payload["z"]
    if z is None:
        return build_layer(kind, fitnesses, registry, targets, model)
    factors, ref = _pair_factors(kind, model, fitnesses, registry)
    probs = _link_probabilities(float(z), factors)
    return LayerModel(kind=kind, model=model, probs=probs, z=float(z),
                      target_links=float(payload["target_links"]),
                      admissible=int(np.count_nonzero(factors)),
                      fitness_ref=ref)


def sample_layer(model: LayerModel, rng: np.random.Generator) -> SampledLayer:
    """Draw one graph: every admissible pair links independently.

    Uniform deviates are drawn for the whole pair matrix in row-major order
    (origins outer), so a given generator state always yields the same draw.
    """
    mask = rng.random(model.probs.shape) < model.probs
    edges = np.argwhere(mask)
    return SampledLayer(kind=model.kind, shape=model.probs.shape, edges=edges)
