"""Bundled data-generating scenarios.

Two effect scenarios calibrated by simulation so the realized true
sample incidence ratio sits near 0.70 with a control-arm three-year
cumulative incidence in the 1-2% range, plus the matching null (the
intervention hazard is forced equal to control, so the coupled
counterfactuals make the true ratio exactly 1). The hazard
trajectories and coefficient values are calibration choices, not
estimates from any real trial.
"""

from __future__ import annotations

import math

from .trialsim import (
    CensoringModel,
    CovariateModel,
    HazardModel,
    IndividualModel,
    LogitLinearModel,
    MeasurementModel,
    RegionSpec,
    ScenarioConfig,
)

__all__ = ["PRESETS", "preset_scenario", "preset_names"]


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


_REGIONS = (
    RegionSpec("eastern_uganda", "uganda", 10),
    RegionSpec("western_uganda", "uganda", 10),
    RegionSpec("kenya", "kenya", 12),
)

_SIZE_BOUNDS = {"uganda": (4000, 6000), "kenya": (3500, 5480)}

_PREVALENCE = LogitLinearModel(
    intercepts={
        "eastern_uganda": _logit(0.05),
        "western_uganda": _logit(0.08),
        "kenya": _logit(0.22),
    },
    coefficients=(0.50, 0.35, 0.30),
    noise_sd=0.15,
)

_CIRCUMCISION = LogitLinearModel(
    intercepts={
        "eastern_uganda": _logit(0.55),
        "western_uganda": _logit(0.35),
        "kenya": _logit(0.45),
    },
    coefficients=(-0.30, 0.20, 0.15),
    noise_sd=0.25,
)

_HAZARD = HazardModel(
    coefficients=(0.10, 0.08, 0.06),
    prevalence_coefficient=3.5,
    circumcision_coefficient=-2.5,
    noise_sd=0.08,
    noise_correlation=0.5,
)


def _effect_scenario(name: str, control, intervention) -> ScenarioConfig:
    return ScenarioConfig(
        name=name,
        regions=_REGIONS,
        size_bounds=_SIZE_BOUNDS,
        coverage_bounds=(0.80, 0.90),
        control_hazard=control,
        intervention_hazard=intervention,
        covariates=CovariateModel(),
        prevalence=_PREVALENCE,
        circumcision=_CIRCUMCISION,
        hazard=_HAZARD,
        individuals=IndividualModel(),
        censoring=CensoringModel(mode="nondifferential", nondifferential_annual=0.02),
        measurement=MeasurementModel(mode="noninformative"),
    )


def scenario_a() -> ScenarioConfig:
    return _effect_scenario(
        "scenario_a",
        control={"uganda": (0.0150, 0.0130, 0.0110), "kenya": (0.0180, 0.0160, 0.0140)},
        intervention={"uganda": (0.0137, 0.0089, 0.0056), "kenya": (0.0164, 0.0110, 0.0067)},
    )


def scenario_b() -> ScenarioConfig:
    return _effect_scenario(
        "scenario_b",
        control={"uganda": (0.0145, 0.0122, 0.0103), "kenya": (0.0174, 0.0150, 0.0130)},
        intervention={"uganda": (0.0132, 0.0083, 0.0052), "kenya": (0.0158, 0.0102, 0.0062)},
    )


def scenario_null() -> ScenarioConfig:
    import dataclasses

    return dataclasses.replace(scenario_a(), name="scenario_null", effect_null=True)


PRESETS = {
    "scenario_a": scenario_a,
    "scenario_b": scenario_b,
    "scenario_null": scenario_null,
}


def preset_names() -> tuple[str, ...]:
    return tuple(PRESETS)


def preset_scenario(name: str) -> ScenarioConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(
            f"unknown scenario preset {name!r}; available: {', '.join(PRESETS)}"
        ) from None
