"""Synthetic pair-matched trial generator.

Builds complete trials: community covariates with block correlation,
baseline prevalence and circumcision coverage on the logit scale,
per-arm annual infection hazards, and individual-level infection,
censoring and measurement histories under both arms (common random
numbers, so a null scenario couples the arms exactly). The observed
data keep only the baseline and final rounds; interim rounds exist so
that differential measurement mechanisms can act through them.

All randomness flows through :class:`pairedcrt.numkit.RngStream`
children keyed by (namespace, community, purpose), which makes
generation bit-identical regardless of evaluation order or
parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from . import stage1
from ._kernels import simulate_histories
from .matchpairs import MatchedPairing
from .numkit import RngStream, expit, logit, mvn_sample

__all__ = [
    "CensoringModel",
    "CovariateModel",
    "HazardModel",
    "IndividualModel",
    "LogitLinearModel",
    "MeasurementModel",
    "People",
    "RegionSpec",
    "ScenarioConfig",
    "SimCommunity",
    "gen_communities",
    "gen_individuals",
    "generate_trial_communities",
    "incidence_cohort",
    "km_pair_cv",
    "true_community_incidence",
    "true_sample_ratio",
]

CONTROL, INTERVENTION = 0, 1

CENSORING_MODES = ("none", "nondifferential", "differential", "mixture")
MEASUREMENT_MODES = (
    "noninformative",
    "informative_true_status",
    "informative_known_status",
    "mixture",
)

# Stream namespaces / purposes (path elements must be plain ints).
_NS_COMMUNITY = 1
_P_COVARIATES = 0
_P_PREVALENCE = 1
_P_CIRCUMCISION = 2
_P_SIZE = 3
_P_COVERAGE = 4
_P_HAZARD = 5
_P_SCENARIO = 6
_P_PEOPLE = 7


@dataclass(frozen=True)
class RegionSpec:
    name: str
    country: str
    n_communities: int


@dataclass(frozen=True)
class CovariateModel:
    """Nine community covariates e1..e9 from a block-correlated MVN.

    e1-e3 and e4-e6 are each internally exchangeable with the given
    correlation; e7-e9 are independent; blocks are independent of each
    other.
    """

    block_correlation: float = 0.25
    scale: float = 1.0

    def covariance(self) -> np.ndarray:
        cov = np.eye(9)
        for lo in (0, 3):
            block = cov[lo : lo + 3, lo : lo + 3]
            block[block == 0.0] = self.block_correlation
        return cov * self.scale**2


@dataclass(frozen=True)
class LogitLinearModel:
    """expit(intercept[region] + coefficients . (e1, e4, e7) + noise)."""

    intercepts: Mapping[str, float]
    coefficients: tuple[float, float, float]
    noise_sd: float


@dataclass(frozen=True)
class HazardModel:
    """Multiplier structure on top of the per-country hazard trajectory.

    hazard[t] = trajectory[t]
                * exp(coefficients . (e2, e5, e8)
                      + prevalence_coefficient * (prev - regional ref)
                      + circumcision_coefficient * (mc - regional ref))
                * lognormal year noise correlated within community.
    """

    coefficients: tuple[float, float, float]
    prevalence_coefficient: float
    circumcision_coefficient: float
    noise_sd: float
    noise_correlation: float = 0.5


@dataclass(frozen=True)
class IndividualModel:
    age_probs: tuple[float, ...] = (0.35, 0.30, 0.20, 0.15)
    male_prob: float = 0.5
    # log-odds shifts applied to community prevalence for baseline status
    age_prevalence_shift: tuple[float, ...] = (0.25, 0.15, -0.10, -0.35)
    male_prevalence_shift: float = -0.10
    # log hazard multipliers
    age_hazard_log: tuple[float, ...] = (0.30, 0.10, -0.15, -0.45)
    male_hazard_log: float = -0.30
    circumcision_hazard_log: float = -0.90


@dataclass(frozen=True)
class CensoringModel:
    """Annual probability of death/out-migration.

    ``differential`` entries are (hiv-negative, hiv-positive) annual
    probabilities per arm; ``mixture`` assigns one of the three
    concrete modes to each community with equal probability.
    """

    mode: str = "nondifferential"
    nondifferential_annual: float = 0.02
    differential_control: tuple[float, float] = (0.02, 0.035)
    differential_intervention: tuple[float, float] = (0.02, 0.012)


@dataclass(frozen=True)
class MeasurementModel:
    """Annual probability of having status observed (campaign/tracking).

    Interim rounds apply to the intervention arm only; control interim
    measurement probability is 0 by design. Informative tables are
    (negative/not-known, positive/known) probabilities; the
    ``informative_known_status`` mode keys them on previously observed
    positive status rather than the underlying current status.
    """

    mode: str = "noninformative"
    noninformative_final: float = 0.75
    noninformative_interim: float = 0.70
    informative_final_control: tuple[float, float] = (0.76, 0.65)
    informative_final_intervention: tuple[float, float] = (0.73, 0.83)
    informative_interim_intervention: tuple[float, float] = (0.70, 0.80)


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete, seedable description of a data-generating scenario."""

    name: str
    regions: tuple[RegionSpec, ...]
    size_bounds: Mapping[str, tuple[int, int]]
    coverage_bounds: tuple[float, float]
    control_hazard: Mapping[str, tuple[float, float, float]]
    intervention_hazard: Mapping[str, tuple[float, float, float]]
    covariates: CovariateModel = field(default_factory=CovariateModel)
    prevalence: LogitLinearModel | None = None
    circumcision: LogitLinearModel | None = None
    hazard: HazardModel | None = None
    individuals: IndividualModel = field(default_factory=IndividualModel)
    censoring: CensoringModel = field(default_factory=CensoringModel)
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    effect_null: bool = False
    master_seed: int = 0
    size_scale: float = 1.0

    def validate(self) -> None:
        for spec in self.regions:
            if spec.n_communities % 2:
                raise ValueError(f"region {spec.name!r} has an odd community count")
            if spec.country not in self.size_bounds:
                raise ValueError(f"no size bounds for country {spec.country!r}")
            if spec.country not in self.control_hazard:
                raise ValueError(f"no control hazards for country {spec.country!r}")
            if spec.country not in self.intervention_hazard:
                raise ValueError(f"no intervention hazards for {spec.country!r}")
            for model, label in ((self.prevalence, "prevalence"), (self.circumcision, "circumcision")):
                if model is not None and spec.name not in model.intercepts:
                    raise ValueError(f"{label} model lacks intercept for region {spec.name!r}")
        for country, (lo, hi) in self.size_bounds.items():
            if lo > hi or lo <= 0:
                raise ValueError(f"bad size bounds for {country!r}: ({lo}, {hi})")
        lo, hi = self.coverage_bounds
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("coverage bounds must satisfy 0 <= lo <= hi <= 1")
        for table in (self.control_hazard, self.intervention_hazard):
            for country, rates in table.items():
                if len(rates) != 3 or any(r < 0.0 for r in rates):
                    raise ValueError(f"hazard trajectory for {country!r} must be 3 rates >= 0")
        if self.censoring.mode not in CENSORING_MODES:
            raise ValueError(f"unknown censoring mode {self.censoring.mode!r}")
        if self.measurement.mode not in MEASUREMENT_MODES:
            raise ValueError(f"unknown measurement mode {self.measurement.mode!r}")
        probs = [
            self.censoring.nondifferential_annual,
            *self.censoring.differential_control,
            *self.censoring.differential_intervention,
            self.measurement.noninformative_final,
            self.measurement.noninformative_interim,
            *self.measurement.informative_final_control,
            *self.measurement.informative_final_intervention,
            *self.measurement.informative_interim_intervention,
            *self.individuals.age_probs,
            self.individuals.male_prob,
        ]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("all probabilities must lie in [0, 1]")
        if abs(sum(self.individuals.age_probs) - 1.0) > 1e-9:
            raise ValueError("age probabilities must sum to 1")
        if self.size_scale <= 0.0:
            raise ValueError("size_scale must be positive")
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")


@dataclass
class People:
    """Struct-of-arrays view of one community's residents.

    ``infected``, ``censored`` and ``observed`` are (2, n, 4) uint8
    arrays indexed by (arm, individual, year); both arms are generated
    with shared noise so counterfactuals stay coupled.
    """

    age_group: np.ndarray
    male: np.ndarray
    circumcised: np.ndarray
    infected: np.ndarray
    censored: np.ndarray
    observed: np.ndarray

    def __len__(self) -> int:
        return self.age_group.shape[0]


@dataclass
class SimCommunity:
    id: str
    region: str
    country: str
    covariates: np.ndarray  # e1..e9
    prevalence: float
    mc_coverage: float
    size: int
    baseline_coverage: float
    hazards: np.ndarray  # (2, 3): arm x year
    censoring_mode: str
    measurement_mode: str
    people: People | None = None

    @property
    def covariate_map(self) -> dict[str, float]:
        return {f"e{i + 1}": float(v) for i, v in enumerate(self.covariates)}


def _region_of(config: ScenarioConfig) -> list[RegionSpec]:
    out = []
    for spec in config.regions:
        out.extend([spec] * spec.n_communities)
    return out


def _logit_linear(model: LogitLinearModel | None, region: str,
                  e: np.ndarray, gen: np.random.Generator, fallback: float) -> float:
    noise = gen.standard_normal()
    if model is None:
        return fallback
    pred = (
        model.intercepts[region]
        + model.coefficients[0] * e[0]
        + model.coefficients[1] * e[3]
        + model.coefficients[2] * e[6]
        + model.noise_sd * noise
    )
    return float(expit(pred))


def gen_communities(config: ScenarioConfig, rng: RngStream | None = None) -> list[SimCommunity]:
    """Draw all community-level quantities (no individuals yet)."""
    config.validate()
    if rng is None:
        rng = RngStream(config.master_seed)

    mixture_censoring = ("none", "nondifferential", "differential")
    mixture_measurement = (
        "noninformative",
        "informative_true_status",
        "informative_known_status",
    )

    cov = config.covariates.covariance()
    communities = []
    for j, spec in enumerate(_region_of(config)):
        node = rng.child(_NS_COMMUNITY, j)
        e = mvn_sample(node.child(_P_COVARIATES), np.zeros(9), cov)
        prev = _logit_linear(
            config.prevalence, spec.name, e,
            node.child(_P_PREVALENCE).generator(), fallback=0.10,
        )
        mc = _logit_linear(
            config.circumcision, spec.name, e,
            node.child(_P_CIRCUMCISION).generator(), fallback=0.40,
        )
        lo, hi = config.size_bounds[spec.country]
        raw = int(node.child(_P_SIZE).generator().integers(lo, hi + 1))
        size = max(10, int(round(raw * config.size_scale)))
        cov_lo, cov_hi = config.coverage_bounds
        coverage = float(node.child(_P_COVERAGE).generator().uniform(cov_lo, cov_hi))

        control = np.asarray(config.control_hazard[spec.country], dtype=float)
        if config.effect_null:
            intervention = control.copy()
        else:
            intervention = np.asarray(config.intervention_hazard[spec.country], dtype=float)
        hazards = np.stack([control, intervention])
        if config.hazard is not None:
            hz = config.hazard
            prev_ref = (
                expit(config.prevalence.intercepts[spec.name])
                if config.prevalence is not None
                else 0.10
            )
            mc_ref = (
                expit(config.circumcision.intercepts[spec.name])
                if config.circumcision is not None
                else 0.40
            )
            mult = math.exp(
                hz.coefficients[0] * e[1]
                + hz.coefficients[1] * e[4]
                + hz.coefficients[2] * e[7]
                + hz.prevalence_coefficient * (prev - prev_ref)
                + hz.circumcision_coefficient * (mc - mc_ref)
            )
            g = node.child(_P_HAZARD).generator()
            shared = g.standard_normal()
            yearly = g.standard_normal(3)
            rho = hz.noise_correlation
            z = math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * yearly
            noise = np.exp(hz.noise_sd * z - 0.5 * hz.noise_sd**2)
            hazards = hazards * mult * noise  # same multiplier both arms

        scen_gen = node.child(_P_SCENARIO).generator()
        cmode = config.censoring.mode
        if cmode == "mixture":
            cmode = mixture_censoring[int(scen_gen.integers(len(mixture_censoring)))]
        mmode = config.measurement.mode
        if mmode == "mixture":
            mmode = mixture_measurement[int(scen_gen.integers(len(mixture_measurement)))]

        communities.append(
            SimCommunity(
                id=f"c{j:02d}",
                region=spec.name,
                country=spec.country,
                covariates=e,
                prevalence=prev,
                mc_coverage=mc,
                size=size,
                baseline_coverage=coverage,
                hazards=hazards,
                censoring_mode=cmode,
                measurement_mode=mmode,
            )
        )
    return communities


def _correlated_uniforms(gen: np.random.Generator, n: int, rounds: int) -> np.ndarray:
    # Gaussian copula: a persistent frailty and a fresh innovation get
    # equal variance shares, so marginals stay exactly uniform while
    # successive rounds are positively correlated within an individual.
    frailty = gen.standard_normal(n)
    innovations = gen.standard_normal((n, rounds))
    w = math.sqrt(0.5)
    return ndtr(w * frailty[:, None] + w * innovations)


def _censoring_probs(config: ScenarioConfig, mode: str, arm: int) -> np.ndarray:
    cm = config.censoring
    if mode == "none":
        return np.zeros((2, 3))
    if mode == "nondifferential":
        return np.full((2, 3), cm.nondifferential_annual)
    neg, pos = (
        cm.differential_control if arm == CONTROL else cm.differential_intervention
    )
    return np.stack([np.full(3, neg), np.full(3, pos)])


def _measurement_probs(config: ScenarioConfig, mode: str, arm: int) -> tuple[np.ndarray, bool]:
    mm = config.measurement
    neg = np.zeros(3)
    pos = np.zeros(3)
    if mode == "noninformative":
        if arm == INTERVENTION:
            neg[:2] = pos[:2] = mm.noninformative_interim
        neg[2] = pos[2] = mm.noninformative_final
        return np.stack([neg, pos]), False
    on_known = mode == "informative_known_status"
    if arm == INTERVENTION:
        neg[:2], pos[:2] = mm.informative_interim_intervention
        neg[2], pos[2] = mm.informative_final_intervention
    else:
        neg[2], pos[2] = mm.informative_final_control
    return np.stack([neg, pos]), on_known


def gen_individuals(
    community: SimCommunity, config: ScenarioConfig, rng: RngStream
) -> SimCommunity:
    """Populate one community with coupled two-arm individual histories."""
    j = int(community.id[1:])
    gen = rng.child(_NS_COMMUNITY, j, _P_PEOPLE).generator()
    n = community.size
    ind = config.individuals

    age_group = gen.choice(len(ind.age_probs), size=n, p=ind.age_probs).astype(np.int8)
    male = (gen.random(n) < ind.male_prob).astype(np.uint8)
    circ_draw = gen.random(n)
    circumcised = (male == 1) & (circ_draw < community.mc_coverage)
    circumcised = circumcised.astype(np.uint8)

    u_inf = _correlated_uniforms(gen, n, 4)
    u_cens = _correlated_uniforms(gen, n, 3)
    u_meas = _correlated_uniforms(gen, n, 4)

    prev = min(max(community.prevalence, 1e-6), 1.0 - 1e-6)
    shift = (
        np.asarray(ind.age_prevalence_shift)[age_group]
        + ind.male_prevalence_shift * male
    )
    p_prevalent = expit(logit(prev) + shift)
    p_base_meas = np.full(n, community.baseline_coverage)

    risk_log = (
        np.asarray(ind.age_hazard_log)[age_group]
        + ind.male_hazard_log * male
        + ind.circumcision_hazard_log * circumcised
    )
    risk = np.exp(risk_log)

    out_inf = np.empty((2, n, 4), dtype=np.uint8)
    out_cens = np.empty((2, n, 4), dtype=np.uint8)
    out_obs = np.empty((2, n, 4), dtype=np.uint8)
    for arm in (CONTROL, INTERVENTION):
        p_inf = -np.expm1(-np.outer(risk, community.hazards[arm]))
        p_cens = _censoring_probs(config, community.censoring_mode, arm)
        p_meas, on_known = _measurement_probs(config, community.measurement_mode, arm)
        infected, censored, observed = simulate_histories(
            u_inf,
            u_cens,
            u_meas,
            p_prevalent,
            p_base_meas,
            p_inf,
            p_cens[0],
            p_cens[1],
            p_meas[0],
            p_meas[1],
            on_known,
        )
        out_inf[arm] = infected
        out_cens[arm] = censored
        out_obs[arm] = observed

    community.people = People(
        age_group=age_group,
        male=male,
        circumcised=circumcised,
        infected=out_inf,
        censored=out_cens,
        observed=out_obs,
    )
    return community


def generate_trial_communities(
    config: ScenarioConfig, rng: RngStream | None = None
) -> list[SimCommunity]:
    """Communities plus individuals in one call."""
    if rng is None:
        rng = RngStream(config.master_seed)
    communities = gen_communities(config, rng)
    for community in communities:
        gen_individuals(community, config, rng)
    return communities


def _cohort_mask(community: SimCommunity, arm: int) -> np.ndarray:
    # Baseline-negative and measured at baseline; baseline states are
    # arm-invariant because both arms share the baseline draws.
    people = community.people
    if people is None:
        raise ValueError(f"community {community.id!r} has no individuals")
    return (people.infected[arm, :, 0] == 0) & (people.observed[arm, :, 0] == 1)


def incidence_cohort(community: SimCommunity, arm: int) -> "stage1.Cohort":
    """Project one community's simulated histories to the observed data.

    Only baseline and final-round states enter: the cohort is everyone
    baseline-negative and baseline-measured; each member carries final
    censoring, final measurement, and (when measured) final status.
    """
    people = community.people
    mask = _cohort_mask(community, arm)
    idx = np.flatnonzero(mask)
    censored = people.censored[arm, idx, 3].astype(np.uint8)
    measured = people.observed[arm, idx, 3].astype(np.uint8)
    outcome = np.where(measured == 1, people.infected[arm, idx, 3], -1).astype(np.int8)
    return stage1.Cohort(
        ids=[f"{community.id}-{k}" for k in idx],
        covariates={
            "age_group": people.age_group[idx].astype(float),
            "male": people.male[idx].astype(float),
            "circumcised": people.circumcised[idx].astype(float),
        },
        censored=censored,
        measured=measured,
        infected=outcome,
    )


def true_community_incidence(community: SimCommunity, arm: int) -> float:
    """Counterfactual three-year cumulative incidence in the cohort,
    with censoring prevented and final status fully known."""
    mask = _cohort_mask(community, arm)
    if not mask.any():
        raise ValueError(f"community {community.id!r} has an empty cohort")
    return float(community.people.infected[arm, mask, 3].mean())


def true_sample_ratio(communities: Sequence[SimCommunity]) -> float:
    """True sample incidence ratio for this set of communities."""
    mean1 = float(np.mean([true_community_incidence(c, INTERVENTION) for c in communities]))
    mean0 = float(np.mean([true_community_incidence(c, CONTROL) for c in communities]))
    if mean0 == 0.0:
        raise ValueError("true control-arm incidence is zero; ratio undefined")
    return mean1 / mean0


def km_pair_cv(pairing: MatchedPairing, control_truths: Mapping[str, float]) -> float:
    """Matched-pair coefficient of variation of the control outcome.

    sqrt( (1 / 2K) * sum_k (y_k1 - y_k2)^2 ) / mean(y), over K pairs.
    """
    diffs = []
    values = []
    for a, b in pairing.pairs:
        try:
            ya, yb = control_truths[a], control_truths[b]
        except KeyError as exc:
            raise ValueError(f"no control outcome for community {exc}") from None
        diffs.append((ya - yb) ** 2)
        values.extend((ya, yb))
    mean = float(np.mean(values))
    if mean == 0.0:
        raise ValueError("mean control outcome is zero; pair CV undefined")
    return float(math.sqrt(np.sum(diffs) / (2.0 * len(diffs))) / mean)


def with_overrides(
    config: ScenarioConfig,
    *,
    master_seed: int | None = None,
    size_scale: float | None = None,
    effect_null: bool | None = None,
) -> ScenarioConfig:
    """Copy of the scenario with runtime knobs replaced."""
    kwargs = {}
    if master_seed is not None:
        kwargs["master_seed"] = master_seed
    if size_scale is not None:
        kwargs["size_scale"] = size_scale
    if effect_null is not None:
        kwargs["effect_null"] = effect_null
    return replace(config, **kwargs) if kwargs else config
