"""pairedcrt: pair-matched cluster randomized trials with rare binary
outcomes — design (power), simulation, and targeted effect estimation."""

from ._kernels import active_backend
from .matchpairs import (
    MatchCandidate,
    MatchedPairing,
    covariate_distance,
    optimal_pairs_within_region,
    pair_discrepancy,
)
from .numkit import GlmFit, RngStream, expit, fit_logistic, logit, t_quantile
from .power import PowerSpec, detectable_reduction, drop_pair_tradeoff, pairs_required
from .presets import preset_names, preset_scenario
from .replicate import analyze_communities, run_replicates, run_trial
from .stage1 import (
    Cohort,
    IndividualRecord,
    SuppressionRecord,
    cumulative_incidence_empirical,
    cumulative_incidence_tmle,
    incidence_rate_midpoint,
    kaplan_meier,
    unsuppressed_person_time,
)
from .stage2 import (
    CommunityRecord,
    EffectEstimate,
    adaptive_prespec,
    break_match_effect,
    drop_pair_sensitivity,
    tmle_effect,
    unadjusted_effect,
)
from .trialsim import (
    ScenarioConfig,
    SimCommunity,
    gen_communities,
    gen_individuals,
    incidence_cohort,
    km_pair_cv,
    true_sample_ratio,
)

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "CommunityRecord",
    "EffectEstimate",
    "GlmFit",
    "IndividualRecord",
    "MatchCandidate",
    "MatchedPairing",
    "PowerSpec",
    "RngStream",
    "ScenarioConfig",
    "SimCommunity",
    "SuppressionRecord",
    "active_backend",
    "adaptive_prespec",
    "analyze_communities",
    "break_match_effect",
    "covariate_distance",
    "cumulative_incidence_empirical",
    "cumulative_incidence_tmle",
    "detectable_reduction",
    "drop_pair_sensitivity",
    "drop_pair_tradeoff",
    "expit",
    "fit_logistic",
    "gen_communities",
    "gen_individuals",
    "incidence_cohort",
    "incidence_rate_midpoint",
    "kaplan_meier",
    "km_pair_cv",
    "logit",
    "optimal_pairs_within_region",
    "pair_discrepancy",
    "pairs_required",
    "preset_names",
    "preset_scenario",
    "run_replicates",
    "run_trial",
    "t_quantile",
    "tmle_effect",
    "true_sample_ratio",
    "unadjusted_effect",
    "unsuppressed_person_time",
]
