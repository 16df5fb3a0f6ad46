"""Between-arm effect estimation on community-level outcomes.

Estimates the sample incidence ratio (intervention mean over control
mean) across matched pairs of communities. The TMLE fits a logistic
outcome regression, a logistic arm mechanism (the known 0.5 when
unadjusted), and a two-dimensional logistic fluctuation, then averages
the targeted arm-specific predictions over every community. Inference
uses influence curves aggregated to the independent unit (matched
pairs, or communities when the match is broken), the delta method on
the log scale, and Student's t with pairs-1 degrees of freedom.

Adjustment variables are chosen by adaptive pre-specification:
leave-one-pair-out cross-validation over a small pre-specified
candidate set, minimizing the estimated influence-curve variance, with
ties broken toward the less adjusted candidate.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .numkit import SingularMatrixError, expit, fit_logistic, logit, t_cdf, t_quantile

__all__ = [
    "CommunityRecord",
    "EffectEstimate",
    "adaptive_prespec",
    "break_match_effect",
    "drop_pair_sensitivity",
    "tmle_effect",
    "unadjusted_effect",
]

ARM_PROB_BOUNDS = (0.05, 0.95)
_Q_BOUND = 1e-10
REGION_VAR = "region"

DEFAULT_OUTCOME_CANDIDATES: tuple[Optional[str], ...] = (
    None,
    "baseline_prevalence",
    "mc_coverage",
)


@dataclass(frozen=True)
class CommunityRecord:
    """One community as seen by the effect analysis."""

    id: str
    region: str
    pair_id: str
    covariates: Mapping[str, float]
    arm: int
    outcome: float
    weight: float = 1.0


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate and influence-curve inference for the ratio.

    ``influence`` holds the log-scale influence-curve value of each
    independent unit (``unit_ids``); the confidence interval is
    exp(log ratio +/- t * log_se) by construction. The additive
    contrast is reported alongside but carries no second test.
    """

    estimator: str
    mean_intervention: float
    mean_control: float
    ratio: float
    log_se: float
    ci_lower: float
    ci_upper: float
    p_value: float
    df: int
    risk_difference: float
    rd_se: float
    rd_ci_lower: float
    rd_ci_upper: float
    unit_ids: tuple[str, ...]
    influence: tuple[float, ...]
    selected_outcome_var: Optional[str] = None
    selected_arm_var: Optional[str] = None
    dropped_pair: Optional[str] = None
    warnings: tuple[str, ...] = ()


def _pair_groups(records: Sequence[CommunityRecord]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for idx, rec in enumerate(records):
        groups.setdefault(rec.pair_id, []).append(idx)
    return groups


def _validate(records: Sequence[CommunityRecord], require_pairs: bool) -> None:
    if not records:
        raise ValueError("no communities")
    for rec in records:
        if rec.arm not in (0, 1):
            raise ValueError(f"community {rec.id!r}: arm must be 0 or 1")
        if not 0.0 <= rec.outcome <= 1.0:
            raise ValueError(f"community {rec.id!r}: outcome must lie in [0, 1]")
        if not rec.weight > 0.0:
            raise ValueError(f"community {rec.id!r}: weight must be positive")
    if require_pairs:
        for pid, idxs in _pair_groups(records).items():
            arms = sorted(records[i].arm for i in idxs)
            if arms != [0, 1]:
                raise ValueError(
                    f"pair {pid!r} must contain exactly one community per arm"
                )


def _extra_columns(
    records: Sequence[CommunityRecord],
    var: Optional[str],
    region_levels: Optional[tuple[str, ...]],
) -> np.ndarray:
    n = len(records)
    if var is None:
        return np.empty((n, 0))
    if var == REGION_VAR:
        levels = region_levels or tuple(sorted({r.region for r in records}))
        cols = [
            np.array([1.0 if r.region == level else 0.0 for r in records])
            for level in levels[1:]
        ]
        return np.column_stack(cols) if cols else np.empty((n, 0))
    try:
        return np.array([[float(r.covariates[var])] for r in records])
    except KeyError:
        raise ValueError(f"unknown adjustment variable {var!r}") from None


@dataclass
class _TmleFit:
    outcome_var: Optional[str]
    arm_var: Optional[str]
    region_levels: Optional[tuple[str, ...]]
    q_coef: np.ndarray
    g_coef: Optional[np.ndarray]
    eps1: float
    eps0: float
    mean1: float
    mean0: float
    point_ic1: np.ndarray
    point_ic0: np.ndarray
    clean: bool
    warnings: tuple[str, ...]

    def arm_probability(self, records: Sequence[CommunityRecord]) -> np.ndarray:
        if self.g_coef is None:
            return np.full(len(records), 0.5)
        design = np.column_stack(
            [np.ones(len(records)), _extra_columns(records, self.arm_var, self.region_levels)]
        )
        lo, hi = ARM_PROB_BOUNDS
        return np.clip(expit(design @ self.g_coef), lo, hi)

    def targeted_predictions(
        self, records: Sequence[CommunityRecord]
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(targeted mean at arm 1, at arm 0, arm-1 probability)."""
        n = len(records)
        extra = _extra_columns(records, self.outcome_var, self.region_levels)
        ones = np.ones(n)
        design1 = np.column_stack([ones, ones, extra])
        design0 = np.column_stack([ones, np.zeros(n), extra])
        q1 = np.clip(expit(design1 @ self.q_coef), _Q_BOUND, 1.0 - _Q_BOUND)
        q0 = np.clip(expit(design0 @ self.q_coef), _Q_BOUND, 1.0 - _Q_BOUND)
        g1 = self.arm_probability(records)
        g0 = 1.0 - g1
        q1_star = expit(logit(q1) + self.eps1 / g1)
        q0_star = expit(logit(q0) + self.eps0 / g0)
        return q1_star, q0_star, g1


def _fit_tmle(
    records: Sequence[CommunityRecord],
    outcome_var: Optional[str],
    arm_var: Optional[str],
    region_levels: Optional[tuple[str, ...]] = None,
) -> _TmleFit:
    n = len(records)
    y = np.array([r.outcome for r in records])
    a = np.array([float(r.arm) for r in records])
    w = np.array([r.weight for r in records])
    w_norm = w / w.sum()
    notes: list[str] = []
    clean = True

    extra = _extra_columns(records, outcome_var, region_levels)
    q_design = np.column_stack([np.ones(n), a, extra])
    q_fit = fit_logistic(q_design, y, weights=w)
    if not q_fit.converged:
        notes.append("outcome regression did not converge; using last iterate")
        clean = False

    if arm_var is None:
        g_coef = None
        g1 = np.full(n, 0.5)
    else:
        g_design = np.column_stack([np.ones(n), _extra_columns(records, arm_var, region_levels)])
        g_fit = fit_logistic(g_design, a, weights=w)
        if not g_fit.converged:
            notes.append("arm mechanism regression did not converge; using last iterate")
            clean = False
        g_coef = g_fit.coefficients
        lo, hi = ARM_PROB_BOUNDS
        g1 = np.clip(expit(g_design @ g_coef), lo, hi)
    g0 = 1.0 - g1

    q_obs = np.clip(expit(q_design @ q_fit.coefficients), _Q_BOUND, 1.0 - _Q_BOUND)
    h1 = a / g1
    h0 = (1.0 - a) / g0
    try:
        fluct = fit_logistic(
            np.column_stack([h1, h0]), y, weights=w, offset=logit(q_obs)
        )
        if fluct.converged:
            eps1, eps0 = (float(v) for v in fluct.coefficients)
        else:
            notes.append("fluctuation did not converge; keeping initial fit")
            clean = False
            eps1 = eps0 = 0.0
    except SingularMatrixError:
        notes.append("fluctuation design singular; keeping initial fit")
        clean = False
        eps1 = eps0 = 0.0

    fit = _TmleFit(
        outcome_var=outcome_var,
        arm_var=arm_var,
        region_levels=region_levels,
        q_coef=q_fit.coefficients,
        g_coef=g_coef,
        eps1=eps1,
        eps0=eps0,
        mean1=0.0,
        mean0=0.0,
        point_ic1=np.empty(0),
        point_ic0=np.empty(0),
        clean=clean,
        warnings=tuple(notes),
    )
    q1_star, q0_star, g1 = fit.targeted_predictions(records)
    fit.mean1 = float(np.sum(w_norm * q1_star))
    fit.mean0 = float(np.sum(w_norm * q0_star))
    fit.point_ic1 = (a / g1) * (y - q1_star)
    fit.point_ic0 = ((1.0 - a) / (1.0 - g1)) * (y - q0_star)
    return fit


def _assemble(
    records: Sequence[CommunityRecord],
    mean1: float,
    mean0: float,
    point_ic1: np.ndarray,
    point_ic0: np.ndarray,
    *,
    estimator: str,
    pair_unit: bool,
    df: Optional[int],
    alpha: float,
    selected_outcome_var: Optional[str] = None,
    selected_arm_var: Optional[str] = None,
    notes: tuple[str, ...] = (),
) -> EffectEstimate:
    if mean0 <= 0.0:
        raise ValueError("control-arm mean outcome is zero; ratio undefined")
    if mean1 <= 0.0:
        raise ValueError("intervention-arm mean outcome is zero; ratio undefined")
    w = np.array([r.weight for r in records])
    w_norm = w / w.sum()
    log_terms = w_norm * (point_ic1 / mean1 - point_ic0 / mean0)
    rd_terms = w_norm * (point_ic1 - point_ic0)

    if pair_unit:
        groups = _pair_groups(records)
        unit_ids = tuple(sorted(groups))
        n_units = len(unit_ids)
        log_ic = np.array([n_units * sum(log_terms[i] for i in groups[pid]) for pid in unit_ids])
        rd_ic = np.array([n_units * sum(rd_terms[i] for i in groups[pid]) for pid in unit_ids])
    else:
        unit_ids = tuple(r.id for r in records)
        n_units = len(records)
        log_ic = n_units * log_terms
        rd_ic = n_units * rd_terms

    if df is None:
        df = n_units - 1
    if df < 1:
        raise ValueError("not enough independent units for inference")

    ratio = mean1 / mean0
    log_ratio = math.log(ratio)
    log_se = math.sqrt(float(np.var(log_ic, ddof=1)) / n_units)
    rd_se = math.sqrt(float(np.var(rd_ic, ddof=1)) / n_units)
    crit = t_quantile(1.0 - alpha / 2.0, df)
    if log_se > 0.0:
        tstat = log_ratio / log_se
        p_value = 2.0 * t_cdf(-abs(tstat), df)
    else:
        p_value = 1.0 if log_ratio == 0.0 else 0.0
    rd = mean1 - mean0
    return EffectEstimate(
        estimator=estimator,
        mean_intervention=mean1,
        mean_control=mean0,
        ratio=ratio,
        log_se=log_se,
        ci_lower=math.exp(log_ratio - crit * log_se),
        ci_upper=math.exp(log_ratio + crit * log_se),
        p_value=p_value,
        df=df,
        risk_difference=rd,
        rd_se=rd_se,
        rd_ci_lower=rd - crit * rd_se,
        rd_ci_upper=rd + crit * rd_se,
        unit_ids=unit_ids,
        influence=tuple(float(v) for v in log_ic),
        selected_outcome_var=selected_outcome_var,
        selected_arm_var=selected_arm_var,
        warnings=notes,
    )


def unadjusted_effect(
    records: Sequence[CommunityRecord], *, alpha: float = 0.05
) -> EffectEstimate:
    """Ratio of weighted arm means, with pair-level influence curves.

    This is the TMLE special case with the arm-specific empirical means
    as outcome predictions and the known arm probability of 0.5.
    """
    _validate(records, require_pairs=True)
    y = np.array([r.outcome for r in records])
    a = np.array([r.arm for r in records])
    w = np.array([r.weight for r in records])
    mean1 = float(np.sum(w[a == 1] * y[a == 1]) / np.sum(w[a == 1]))
    mean0 = float(np.sum(w[a == 0] * y[a == 0]) / np.sum(w[a == 0]))
    point_ic1 = (a == 1) / 0.5 * (y - mean1)
    point_ic0 = (a == 0) / 0.5 * (y - mean0)
    return _assemble(
        records, mean1, mean0, point_ic1, point_ic0,
        estimator="unadjusted", pair_unit=True, df=None, alpha=alpha,
    )


def tmle_effect(
    records: Sequence[CommunityRecord],
    outcome_var: Optional[str] = None,
    arm_var: Optional[str] = None,
    *,
    alpha: float = 0.05,
    pair_unit: bool = True,
    df: Optional[int] = None,
    estimator: str = "tmle",
    region_levels: Optional[tuple[str, ...]] = None,
) -> EffectEstimate:
    """Targeted estimate of the ratio with one optional adjustment
    covariate in the outcome regression and one in the arm mechanism.

    With no adjustment variables this coincides with
    :func:`unadjusted_effect` up to solver precision.
    """
    _validate(records, require_pairs=pair_unit)
    fit = _fit_tmle(records, outcome_var, arm_var, region_levels)
    for note in fit.warnings:
        _warnings.warn(note)
    return _assemble(
        records, fit.mean1, fit.mean0, fit.point_ic1, fit.point_ic0,
        estimator=estimator, pair_unit=pair_unit, df=df, alpha=alpha,
        selected_outcome_var=outcome_var, selected_arm_var=arm_var,
        notes=fit.warnings,
    )


def _cv_variance(
    records: Sequence[CommunityRecord],
    outcome_var: Optional[str],
    arm_var: Optional[str],
    pair_unit: bool,
    region_levels: Optional[tuple[str, ...]],
) -> float:
    """Leave-one-pair-out estimate of the log-scale IC variance.

    Nuisance fits are trained on the remaining pairs; the held-out
    influence-curve values are pooled and their sample variance
    returned. Candidates whose training fits break (separation,
    singularity, degenerate means) score infinity so selection falls
    back toward the unadjusted candidate.
    """
    groups = _pair_groups(records)
    held: list[float] = []
    for pid in sorted(groups):
        train = [r for r in records if r.pair_id != pid]
        val = [records[i] for i in groups[pid]]
        try:
            fit = _fit_tmle(train, outcome_var, arm_var, region_levels)
        except (SingularMatrixError, ValueError):
            return np.inf
        if not fit.clean or fit.mean1 <= 0.0 or fit.mean0 <= 0.0:
            return np.inf
        q1_star, q0_star, g1 = fit.targeted_predictions(val)
        yv = np.array([r.outcome for r in val])
        av = np.array([float(r.arm) for r in val])
        ic = (av / g1) * (yv - q1_star) / fit.mean1 - (
            (1.0 - av) / (1.0 - g1)
        ) * (yv - q0_star) / fit.mean0
        if pair_unit:
            held.append(float(ic.mean()))
        else:
            held.extend(float(v) for v in ic)
    return float(np.var(np.asarray(held), ddof=1))


def _argmin_candidate(scores: Sequence[tuple[Optional[str], float]]) -> Optional[str]:
    best_var, best = scores[0]
    for var, value in scores[1:]:
        if value < best:
            best_var, best = var, value
    return best_var


def adaptive_prespec(
    records: Sequence[CommunityRecord],
    outcome_candidates: Sequence[Optional[str]] = DEFAULT_OUTCOME_CANDIDATES,
    arm_candidates: Optional[Sequence[str]] = None,
    *,
    alpha: float = 0.05,
    pair_unit: bool = True,
    df: Optional[int] = None,
    estimator: str = "adaptive_tmle",
) -> EffectEstimate:
    """TMLE with adjustment variables chosen by leave-one-pair-out CV.

    Selection runs in two stages: first the outcome-regression
    covariate (against the known 0.5 arm mechanism), then the
    arm-mechanism covariate from the remaining candidates. Choosing the
    unadjusted outcome regression forces the unadjusted mechanism. Ties
    go to the earlier (less adjusted) candidate.
    """
    _validate(records, require_pairs=True)
    if len(_pair_groups(records)) < 2:
        raise ValueError("adaptive pre-specification needs at least 2 pairs")
    outcome_candidates = list(outcome_candidates)
    if arm_candidates is None:
        arm_pool: list[str] = [v for v in outcome_candidates if v is not None]
    else:
        arm_pool = list(arm_candidates)
    region_levels = tuple(sorted({r.region for r in records}))

    stage1_scores = [
        (q, _cv_variance(records, q, None, pair_unit, region_levels))
        for q in outcome_candidates
    ]
    chosen_q = _argmin_candidate(stage1_scores)

    if chosen_q is None:
        chosen_g = None
    else:
        g_options: list[Optional[str]] = [None] + [g for g in arm_pool if g != chosen_q]
        stage2_scores = [
            (g, _cv_variance(records, chosen_q, g, pair_unit, region_levels))
            for g in g_options
        ]
        chosen_g = _argmin_candidate(stage2_scores)

    return tmle_effect(
        records,
        chosen_q,
        chosen_g,
        alpha=alpha,
        pair_unit=pair_unit,
        df=df,
        estimator=estimator,
        region_levels=region_levels,
    )


def drop_pair_sensitivity(
    records: Sequence[CommunityRecord],
    var: str = "baseline_prevalence",
    *,
    alpha: float = 0.05,
) -> EffectEstimate:
    """Re-run the adaptive estimator without the worst-matched pair.

    The dropped pair is the one with the largest absolute within-pair
    difference on ``var``; ties drop the lowest pair id (with a
    warning). Degrees of freedom shrink with the pair count.
    """
    _validate(records, require_pairs=True)
    groups = _pair_groups(records)
    if len(groups) < 3:
        raise ValueError("drop-pair analysis needs at least 3 pairs")
    notes: list[str] = []
    disc: dict[str, float] = {}
    for pid, idxs in groups.items():
        a, b = (records[i] for i in idxs)
        if var not in a.covariates or var not in b.covariates:
            raise ValueError(f"pair {pid!r} is missing covariate {var!r}")
        disc[pid] = abs(float(a.covariates[var]) - float(b.covariates[var]))
    worst = max(disc.values())
    candidates = sorted(pid for pid, d in disc.items() if d == worst)
    if len(candidates) > 1:
        notes.append(
            f"discrepancy tie between pairs {candidates}; dropping {candidates[0]!r}"
        )
        _warnings.warn(notes[-1])
    dropped = candidates[0]
    kept = [r for r in records if r.pair_id != dropped]
    est = adaptive_prespec(kept, alpha=alpha, estimator=f"drop_pair[{var}]")
    return replace(est, dropped_pair=dropped, warnings=est.warnings + tuple(notes))


def break_match_effect(
    records: Sequence[CommunityRecord],
    outcome_candidates: Sequence[Optional[str]] = DEFAULT_OUTCOME_CANDIDATES + (REGION_VAR,),
    *,
    alpha: float = 0.05,
) -> EffectEstimate:
    """Sensitivity analysis treating communities as the independent unit.

    Influence curves are not pair-averaged, region joins the candidate
    adjustment set, and the t reference uses (communities - 2) degrees
    of freedom.
    """
    _validate(records, require_pairs=True)
    n_arm1 = sum(r.arm for r in records)
    if min(n_arm1, len(records) - n_arm1) < 3:
        raise ValueError("break-the-match needs at least 3 communities per arm")
    arm_pool = [v for v in outcome_candidates if v is not None]
    return adaptive_prespec(
        records,
        outcome_candidates,
        arm_pool,
        alpha=alpha,
        pair_unit=False,
        df=len(records) - 2,
        estimator="break_match",
    )
