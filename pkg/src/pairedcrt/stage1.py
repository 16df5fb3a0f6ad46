"""Community-level outcome estimation from individual records.

The primary outcome is the empirical cumulative incidence among cohort
members who stayed uncensored and had their final status measured. A
TMLE variant adjusts for informative censoring/measurement through
baseline covariates as a sensitivity analysis. The module also carries
the auxiliary outcome kernels used by other endpoints: midpoint
incidence rates, Kaplan-Meier survival, and the deterministic
unsuppressed person-time reconstruction.
"""

from __future__ import annotations

import bisect
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .numkit import SingularMatrixError, expit, fit_logistic, logit

__all__ = [
    "Cohort",
    "IndividualRecord",
    "KaplanMeierCurve",
    "PersonTime",
    "SuppressionRecord",
    "cumulative_incidence_empirical",
    "cumulative_incidence_tmle",
    "incidence_rate_midpoint",
    "kaplan_meier",
    "unsuppressed_person_time",
]

MISSING = -1  # outcome code when final status was not measured

ART_SUPPRESSION_LAG_DAYS = 182  # "six months" after ART start, fixed for reproducibility
DEFAULT_PROPENSITY_FLOOR = 0.025


@dataclass(frozen=True)
class IndividualRecord:
    """One cohort member in the observed-data projection.

    ``infected`` must be present exactly when ``measured`` is 1. The
    optional times support survival outcomes; they are ignored by the
    incidence estimators.
    """

    id: str
    community_id: str
    covariates: Mapping[str, float]
    censored: int
    measured: int
    infected: Optional[int] = None
    event_time: Optional[float] = None
    censor_time: Optional[float] = None


@dataclass
class Cohort:
    """Column-oriented cohort: one entry per member across all arrays."""

    ids: Sequence[str]
    covariates: dict[str, np.ndarray]
    censored: np.ndarray
    measured: np.ndarray
    infected: np.ndarray  # MISSING where measured == 0

    def __post_init__(self):
        n = len(self.ids)
        self.censored = np.asarray(self.censored, dtype=np.uint8)
        self.measured = np.asarray(self.measured, dtype=np.uint8)
        self.infected = np.asarray(self.infected, dtype=np.int8)
        for name, arr in ((None, self.censored), (None, self.measured), (None, self.infected)):
            if arr.shape != (n,):
                raise ValueError("cohort arrays must all have one entry per member")
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for key, arr in self.covariates.items():
            if arr.shape != (n,):
                raise ValueError(f"covariate {key!r} has wrong length")
        measured_mask = self.measured == 1
        if np.any((self.infected[measured_mask] != 0) & (self.infected[measured_mask] != 1)):
            raise ValueError("measured members must have a 0/1 outcome")
        if np.any(self.infected[~measured_mask] != MISSING):
            raise ValueError("unmeasured members must have outcome marked missing")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[IndividualRecord]) -> "Cohort":
        if not records:
            raise ValueError("empty cohort")
        keys = sorted(records[0].covariates)
        cov = {k: np.array([float(r.covariates[k]) for r in records]) for k in keys}
        infected = np.array(
            [MISSING if r.infected is None else int(r.infected) for r in records],
            dtype=np.int8,
        )
        return cls(
            ids=[r.id for r in records],
            covariates=cov,
            censored=np.array([r.censored for r in records], dtype=np.uint8),
            measured=np.array([r.measured for r in records], dtype=np.uint8),
            infected=infected,
        )

    def to_records(self, community_id: str = "") -> list[IndividualRecord]:
        out = []
        for i, rid in enumerate(self.ids):
            measured = int(self.measured[i])
            out.append(
                IndividualRecord(
                    id=str(rid),
                    community_id=community_id,
                    covariates={k: float(v[i]) for k, v in self.covariates.items()},
                    censored=int(self.censored[i]),
                    measured=measured,
                    infected=int(self.infected[i]) if measured else None,
                )
            )
        return out


def cumulative_incidence_empirical(cohort: Cohort) -> tuple[float, int]:
    """Proportion infected among uncensored, measured members.

    Returns (estimate, denominator). Raises when nobody is both
    uncensored and measured.
    """
    if len(cohort) == 0:
        raise ValueError("empty cohort")
    mask = (cohort.censored == 0) & (cohort.measured == 1)
    denom = int(mask.sum())
    if denom == 0:
        raise ValueError("no measured uncensored members")
    return float(cohort.infected[mask].mean()), denom


def _design_matrix(cohort: Cohort, adjustment_vars: Sequence[str]) -> np.ndarray:
    n = len(cohort)
    cols = [np.ones(n)]
    for var in adjustment_vars:
        if var not in cohort.covariates:
            raise ValueError(f"unknown adjustment variable {var!r}")
        cols.append(cohort.covariates[var])
    return np.column_stack(cols)


def cumulative_incidence_tmle(
    cohort: Cohort,
    adjustment_vars: Sequence[str],
    *,
    propensity_floor: float = DEFAULT_PROPENSITY_FLOOR,
) -> float:
    """Covariate-adjusted cumulative incidence (sensitivity analysis).

    Main-terms logistic regressions for the outcome (among uncensored,
    measured members) and for the probability of being uncensored and
    measured, followed by a logistic fluctuation whose covariate is the
    inverse of the bounded observation probability; the targeted
    predictions are averaged over every cohort member. With an empty
    adjustment set this reduces exactly to the empirical estimator.
    """
    adjustment_vars = list(adjustment_vars)
    if not adjustment_vars:
        estimate, _ = cumulative_incidence_empirical(cohort)
        return estimate

    observed = (cohort.censored == 0) & (cohort.measured == 1)
    if not observed.any():
        raise ValueError("no measured uncensored members")
    design = _design_matrix(cohort, adjustment_vars)
    outcome = cohort.infected.astype(float)

    outcome_fit = fit_logistic(design[observed], outcome[observed])
    if not outcome_fit.converged:
        warnings.warn("outcome regression did not converge; using last iterate")
    q_init = np.clip(outcome_fit.predict(design), 1e-10, 1.0 - 1e-10)

    obs_fit = fit_logistic(design, observed.astype(float))
    if not obs_fit.converged:
        warnings.warn("observation regression did not converge; using last iterate")
    g_hat = obs_fit.predict(design)
    if np.any(g_hat[observed] < propensity_floor):
        warnings.warn(
            f"observation probabilities truncated at {propensity_floor}"
        )
    g_hat = np.clip(g_hat, propensity_floor, 1.0)

    clever = 1.0 / g_hat
    fluct = fit_logistic(
        clever[observed][:, None],
        outcome[observed],
        offset=logit(q_init[observed]),
    )
    if not fluct.converged:
        warnings.warn("fluctuation step did not converge; keeping initial fit")
        eps = 0.0
    else:
        eps = float(fluct.coefficients[0])

    q_star = expit(logit(q_init) + eps * clever)
    return float(q_star.mean())


def incidence_rate_midpoint(cohort: Cohort, followup_years) -> float:
    """Incidence rate per 100 person-years with midpoint imputation.

    ``followup_years`` is either a mapping from member id to follow-up
    time or an array aligned with the cohort. Members who seroconvert
    contribute half their interval; the rest contribute it in full.
    Only uncensored, measured members enter.
    """
    mask = (cohort.censored == 0) & (cohort.measured == 1)
    if not mask.any():
        raise ValueError("no measured uncensored members")
    if isinstance(followup_years, Mapping):
        years = np.array([followup_years[str(i)] for i in cohort.ids], dtype=float)
    else:
        years = np.asarray(followup_years, dtype=float)
        if years.shape != (len(cohort),):
            raise ValueError("followup_years must align with the cohort")
    if np.any(years[mask] <= 0.0):
        raise ValueError("follow-up must be positive for measured members")
    infected = cohort.infected[mask] == 1
    time_at_risk = np.where(infected, 0.5 * years[mask], years[mask])
    total = float(time_at_risk.sum())
    if total == 0.0:
        raise ValueError("zero person-time")
    return 100.0 * float(infected.sum()) / total


@dataclass(frozen=True)
class KaplanMeierCurve:
    """Product-limit curve: step function with survival S(t).

    ``times`` starts at 0 with survival 1; each subsequent entry is an
    event time with the post-event survival. Ties between events and
    censorings put events first (censored subjects still at risk).
    """

    times: np.ndarray
    survival: np.ndarray
    horizon: float
    risk_at_horizon: float

    def survival_at(self, t: float) -> float:
        idx = bisect.bisect_right(self.times.tolist(), t) - 1
        return float(self.survival[max(idx, 0)])


def kaplan_meier(event_times, censor_times, horizon: float) -> KaplanMeierCurve:
    """Kaplan-Meier survival from event and censoring times."""
    events = np.sort(np.asarray(event_times, dtype=float))
    censors = np.sort(np.asarray(censor_times, dtype=float))
    if events.size + censors.size == 0:
        raise ValueError("no subjects")
    if (events.size and events[0] < 0.0) or (censors.size and censors[0] < 0.0):
        raise ValueError("times must be non-negative")

    times = [0.0]
    survival = [1.0]
    current = 1.0
    for u in np.unique(events):
        at_risk = int((events >= u).sum() + (censors >= u).sum())
        d = int((events == u).sum())
        current *= 1.0 - d / at_risk
        times.append(float(u))
        survival.append(current)
    curve_times = np.asarray(times)
    curve_surv = np.asarray(survival)
    idx = np.searchsorted(curve_times, horizon, side="right") - 1
    s_h = float(curve_surv[max(idx, 0)])
    return KaplanMeierCurve(
        times=curve_times,
        survival=curve_surv,
        horizon=float(horizon),
        risk_at_horizon=1.0 - s_h,
    )


CLASSIFICATIONS = ("baseline_pos", "incident", "inmigrant_pos", "missing_baseline_pos")


@dataclass(frozen=True)
class SuppressionRecord:
    """Endpoint-based viral-suppression facts for one HIV-positive resident.

    Dates are days from the community baseline; ``window_end`` closes
    the final tracking round. Field presence is classification
    specific: only baseline prevalent cases carry a baseline
    suppression status, and only in-migrants carry an in-migration
    date.
    """

    id: str
    classification: str
    suppressed_at_y3: bool
    window_end: float
    suppressed_at_baseline: Optional[bool] = None
    art_start_date: Optional[float] = None
    outmigration_date: Optional[float] = None
    death_date: Optional[float] = None
    inmigration_date: Optional[float] = None


@dataclass(frozen=True)
class PersonTime:
    unsuppressed_days: float
    total_days: float

    @property
    def proportion(self) -> float:
        return self.unsuppressed_days / self.total_days if self.total_days else 0.0


def _validate_suppression_record(rec: SuppressionRecord) -> None:
    if rec.classification not in CLASSIFICATIONS:
        raise ValueError(f"record {rec.id!r}: unknown classification {rec.classification!r}")
    if rec.window_end <= 0.0:
        raise ValueError(f"record {rec.id!r}: window_end must be positive")
    for name in ("art_start_date", "outmigration_date", "death_date", "inmigration_date"):
        value = getattr(rec, name)
        if value is not None and not 0.0 <= value <= rec.window_end:
            raise ValueError(f"record {rec.id!r}: {name} outside [0, window_end]")
    if rec.classification == "baseline_pos":
        if rec.suppressed_at_baseline is None:
            raise ValueError(f"record {rec.id!r}: baseline_pos requires suppressed_at_baseline")
    elif rec.suppressed_at_baseline is not None:
        raise ValueError(
            f"record {rec.id!r}: {rec.classification} must not carry suppressed_at_baseline"
        )
    if rec.classification == "inmigrant_pos" and rec.inmigration_date is None:
        raise ValueError(f"record {rec.id!r}: inmigrant_pos requires inmigration_date")
    if rec.classification != "inmigrant_pos" and rec.inmigration_date is not None:
        raise ValueError(f"record {rec.id!r}: inmigration_date only valid for in-migrants")


def _unsuppressed_interval(rec: SuppressionRecord) -> tuple[float, float]:
    """Start/end of the assumed-unsuppressed interval, before censoring."""

    def until_art_lag() -> float:
        if rec.art_start_date is None:
            raise ValueError(
                f"record {rec.id!r}: suppressed at final round but no ART start date"
            )
        return min(rec.art_start_date + ART_SUPPRESSION_LAG_DAYS, rec.window_end)

    cls = rec.classification
    if cls == "baseline_pos":
        if rec.suppressed_at_baseline and rec.suppressed_at_y3:
            return 0.0, 0.0
        if not rec.suppressed_at_baseline and rec.suppressed_at_y3:
            return 0.0, until_art_lag()
        if not rec.suppressed_at_baseline and not rec.suppressed_at_y3:
            return 0.0, rec.window_end
        raise ValueError(
            f"record {rec.id!r}: suppressed at baseline but unsuppressed at final "
            "round has no interpolation rule"
        )
    if cls == "incident":
        if not rec.suppressed_at_y3:
            return rec.window_end / 2.0, rec.window_end
        if rec.art_start_date is None:
            raise ValueError(f"record {rec.id!r}: suppressed incident case requires ART start date")
        return rec.art_start_date / 2.0, until_art_lag()
    if cls == "inmigrant_pos":
        start = rec.inmigration_date
        if not rec.suppressed_at_y3:
            return start, rec.window_end
        return start, max(start, until_art_lag())
    # missing_baseline_pos: treated as baseline prevalent, always/never
    if rec.suppressed_at_y3:
        return 0.0, 0.0
    return 0.0, rec.window_end


def unsuppressed_person_time(records: Sequence[SuppressionRecord]) -> PersonTime:
    """Total unsuppressed and total person-days over a community.

    Person-time runs from baseline (in-migration for in-migrants) to
    the earliest of death, out-migration, and the final-round window
    end; the unsuppressed interval is interpolated from endpoint
    suppression statuses and the ART start date, with suppression
    assumed ART_SUPPRESSION_LAG_DAYS after initiation.
    """
    unsuppressed = 0.0
    total = 0.0
    for rec in records:
        _validate_suppression_record(rec)
        start = rec.inmigration_date if rec.classification == "inmigrant_pos" else 0.0
        end = rec.window_end
        if rec.death_date is not None:
            end = min(end, rec.death_date)
        if rec.outmigration_date is not None:
            end = min(end, rec.outmigration_date)
        total += max(0.0, end - start)
        a, b = _unsuppressed_interval(rec)
        unsuppressed += max(0.0, min(b, end) - max(a, start))
    return PersonTime(unsuppressed_days=unsuppressed, total_days=total)
