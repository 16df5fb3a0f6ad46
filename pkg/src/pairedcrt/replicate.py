"""Single-trial pipeline and the Monte-Carlo replicate harness.

One trial = generate communities and individuals, pair-match within
region on the two matching covariates, randomize arms within pairs,
estimate each community's outcome from its observed projection, and
hand the community-level records to the effect estimators. The harness
repeats this with derived per-replicate seeds and aggregates operating
characteristics against the replicate-specific truth.

Replicate seeds are hash-derived from (master seed, replicate index),
and results are reduced in replicate order, so reports are identical
for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import stage1, stage2, trialsim
from ._kernels import active_backend
from .matchpairs import MatchCandidate, MatchedPairing, optimal_pairs_within_region
from .numkit import RngStream
from .stage2 import CommunityRecord, EffectEstimate
from .trialsim import CONTROL, ScenarioConfig, SimCommunity

__all__ = [
    "EstimatorSummary",
    "MATCH_VARS",
    "ReplicateReport",
    "TrialData",
    "TrialTruth",
    "analyze_communities",
    "replicate_seed",
    "run_replicates",
    "run_trial",
]

MATCH_VARS = ("e4", "e7")
ESTIMATOR_NAMES = ("unadjusted", "adaptive", "tmle", "drop_pair", "break_match")

_NS_TRIAL = 2
_P_ARMS = 0
_NS_REPLICATE = 3


@dataclass(frozen=True)
class TrialTruth:
    mean_intervention: float
    mean_control: float
    ratio: float
    pair_cv: float


@dataclass
class TrialData:
    config: ScenarioConfig
    communities: list[SimCommunity]
    pairing: MatchedPairing
    arms: dict[str, int]
    records: list[CommunityRecord]
    cohorts: dict[str, stage1.Cohort]
    denominators: dict[str, int]
    truth: TrialTruth


def _measured_baseline_prevalence(community: SimCommunity, arm: int) -> float:
    people = community.people
    seen = people.observed[arm, :, 0] == 1
    if not seen.any():
        return community.prevalence
    return float(people.infected[arm, seen, 0].mean())


def _measured_mc_coverage(community: SimCommunity, arm: int) -> float:
    people = community.people
    seen = (people.observed[arm, :, 0] == 1) & (people.male == 1)
    if not seen.any():
        return community.mc_coverage
    return float(people.circumcised[seen].mean())


def run_trial(
    config: ScenarioConfig,
    *,
    weighting: str = "equal",
    stage1_adjust: Sequence[str] = (),
) -> TrialData:
    """Generate, match, randomize and summarize one complete trial."""
    if weighting not in ("equal", "size"):
        raise ValueError("weighting must be 'equal' or 'size'")
    rng = RngStream(config.master_seed)
    communities = trialsim.generate_trial_communities(config, rng)
    candidates = [MatchCandidate(c.id, c.region, c.covariate_map) for c in communities]
    pairing = optimal_pairs_within_region(candidates, MATCH_VARS)

    arms: dict[str, int] = {}
    for k, (first, second) in enumerate(pairing.pairs):
        coin = int(rng.child(_NS_TRIAL, _P_ARMS, k).generator().integers(2))
        arms[first] = coin
        arms[second] = 1 - coin

    by_id = {c.id: c for c in communities}
    records: list[CommunityRecord] = []
    cohorts: dict[str, stage1.Cohort] = {}
    denominators: dict[str, int] = {}
    for k, pair in enumerate(pairing.pairs):
        for cid in pair:
            community = by_id[cid]
            arm = arms[cid]
            cohort = trialsim.incidence_cohort(community, arm)
            if stage1_adjust:
                outcome = stage1.cumulative_incidence_tmle(cohort, stage1_adjust)
                _, denom = stage1.cumulative_incidence_empirical(cohort)
            else:
                outcome, denom = stage1.cumulative_incidence_empirical(cohort)
            covariates = dict(community.covariate_map)
            covariates["baseline_prevalence"] = _measured_baseline_prevalence(community, arm)
            covariates["mc_coverage"] = _measured_mc_coverage(community, arm)
            records.append(
                CommunityRecord(
                    id=cid,
                    region=community.region,
                    pair_id=f"p{k:02d}",
                    covariates=covariates,
                    arm=arm,
                    outcome=outcome,
                    weight=float(denom) if weighting == "size" else 1.0,
                )
            )
            cohorts[cid] = cohort
            denominators[cid] = denom

    control_truth = {
        c.id: trialsim.true_community_incidence(c, CONTROL) for c in communities
    }
    truth = TrialTruth(
        mean_intervention=float(
            np.mean([trialsim.true_community_incidence(c, 1) for c in communities])
        ),
        mean_control=float(np.mean(list(control_truth.values()))),
        ratio=trialsim.true_sample_ratio(communities),
        pair_cv=trialsim.km_pair_cv(pairing, control_truth),
    )
    return TrialData(
        config=config,
        communities=communities,
        pairing=pairing,
        arms=arms,
        records=records,
        cohorts=cohorts,
        denominators=denominators,
        truth=truth,
    )


def analyze_communities(
    records: Sequence[CommunityRecord],
    estimator: str,
    *,
    alpha: float = 0.05,
    outcome_var: Optional[str] = None,
    arm_var: Optional[str] = None,
    drop_var: str = "baseline_prevalence",
) -> EffectEstimate:
    """Dispatch one named estimator on community-level records."""
    if estimator == "unadjusted":
        return stage2.unadjusted_effect(records, alpha=alpha)
    if estimator == "adaptive":
        return stage2.adaptive_prespec(records, alpha=alpha)
    if estimator == "tmle":
        return stage2.tmle_effect(records, outcome_var, arm_var, alpha=alpha)
    if estimator == "drop_pair":
        return stage2.drop_pair_sensitivity(records, drop_var, alpha=alpha)
    if estimator == "break_match":
        return stage2.break_match_effect(records, alpha=alpha)
    raise ValueError(
        f"unknown estimator {estimator!r}; expected one of {ESTIMATOR_NAMES}"
    )


def replicate_seed(master_seed: int, index: int) -> int:
    """Derived 64-bit seed for one replicate (hash mix, parallel safe)."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(_NS_REPLICATE, index))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    n_used: int
    n_failed: int
    bias_ratio: float
    bias_log: float
    mean_se: float
    mean_tstat: float
    coverage: float
    reject_rate: float

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
            "bias_ratio": self.bias_ratio,
            "bias_log": self.bias_log,
            "mean_se": self.mean_se,
            "mean_tstat": self.mean_tstat,
            "coverage": self.coverage,
            "reject_rate": self.reject_rate,
        }


@dataclass
class ReplicateReport:
    scenario: str
    master_seed: int
    n_replicates: int
    size_scale: float
    alpha: float
    backend: str
    mean_true_ratio: float
    mean_pair_cv: float
    estimators: dict[str, EstimatorSummary]
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "master_seed": self.master_seed,
            "n_replicates": self.n_replicates,
            "size_scale": self.size_scale,
            "alpha": self.alpha,
            "backend": self.backend,
            "mean_true_ratio": self.mean_true_ratio,
            "mean_pair_cv": self.mean_pair_cv,
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
            "failures": self.failures,
        }


def _one_replicate(args) -> dict:
    config, index, estimators, alpha, weighting = args
    seeded = trialsim.with_overrides(config, master_seed=replicate_seed(config.master_seed, index))
    out: dict = {"index": index}
    try:
        trial = run_trial(seeded, weighting=weighting)
    except Exception as exc:  # noqa: BLE001 - failures are data, not crashes
        out["error"] = f"{type(exc).__name__}: {exc}"
        return out
    out["truth"] = (trial.truth.mean_intervention, trial.truth.mean_control,
                    trial.truth.ratio, trial.truth.pair_cv)
    results = {}
    for name in estimators:
        try:
            est = analyze_communities(trial.records, name, alpha=alpha)
            results[name] = (est.ratio, est.log_se, est.ci_lower, est.ci_upper, est.p_value)
        except Exception as exc:  # noqa: BLE001
            results[name] = f"{type(exc).__name__}: {exc}"
    out["results"] = results
    return out


def run_replicates(
    config: ScenarioConfig,
    n_replicates: int,
    estimators: Sequence[str] = ("unadjusted", "adaptive"),
    *,
    alpha: float = 0.05,
    weighting: str = "equal",
    jobs: int = 1,
) -> ReplicateReport:
    """Operating characteristics of the estimators over repeated trials."""
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    for name in estimators:
        if name not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {name!r}")
    tasks = [(config, i, tuple(estimators), alpha, weighting) for i in range(n_replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_one_replicate, tasks, chunksize=max(1, n_replicates // (jobs * 4))))
    else:
        raw = [_one_replicate(t) for t in tasks]
    raw.sort(key=lambda r: r["index"])

    failures: list[dict] = []
    truths: list[tuple] = []
    per_estimator: dict[str, list[tuple]] = {name: [] for name in estimators}
    fail_counts: dict[str, int] = {name: 0 for name in estimators}
    for rep in raw:
        if "error" in rep:
            failures.append({"replicate": rep["index"], "stage": "simulate", "error": rep["error"]})
            for name in estimators:
                fail_counts[name] += 1
            continue
        truth = rep["truth"]
        truths.append(truth)
        for name in estimators:
            res = rep["results"][name]
            if isinstance(res, str):
                failures.append({"replicate": rep["index"], "stage": name, "error": res})
                fail_counts[name] += 1
            else:
                per_estimator[name].append((truth[2],) + res)

    summaries = {}
    for name in estimators:
        rows = per_estimator[name]
        if rows:
            arr = np.array(rows)  # truth, ratio, log_se, ci_lo, ci_hi, p
            truth_r, ratio, log_se, ci_lo, ci_hi, pval = arr.T
            with np.errstate(divide="ignore"):
                tstat = np.where(log_se > 0, np.log(ratio) / np.where(log_se > 0, log_se, 1.0), 0.0)
            summaries[name] = EstimatorSummary(
                estimator=name,
                n_used=len(rows),
                n_failed=fail_counts[name],
                bias_ratio=float(np.mean(ratio - truth_r)),
                bias_log=float(np.mean(np.log(ratio) - np.log(truth_r))),
                mean_se=float(np.mean(log_se)),
                mean_tstat=float(np.mean(tstat)),
                coverage=float(np.mean((ci_lo <= truth_r) & (truth_r <= ci_hi))),
                reject_rate=float(np.mean(pval < alpha)),
            )
        else:
            summaries[name] = EstimatorSummary(
                estimator=name, n_used=0, n_failed=fail_counts[name],
                bias_ratio=math.nan, bias_log=math.nan, mean_se=math.nan,
                mean_tstat=math.nan, coverage=math.nan, reject_rate=math.nan,
            )

    truth_arr = np.array(truths) if truths else np.full((1, 4), np.nan)
    return ReplicateReport(
        scenario=config.name,
        master_seed=config.master_seed,
        n_replicates=n_replicates,
        size_scale=config.size_scale,
        alpha=alpha,
        backend=active_backend(),
        mean_true_ratio=float(np.mean(truth_arr[:, 2])),
        mean_pair_cv=float(np.mean(truth_arr[:, 3])),
        estimators=summaries,
        failures=failures,
    )
