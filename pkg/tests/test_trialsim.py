import dataclasses
import math

import numpy as np
import pytest

from pairedcrt import _kernels, trialsim
from pairedcrt.matchpairs import MatchedPairing
from pairedcrt.numkit import RngStream
from pairedcrt.presets import scenario_a, scenario_null
from pairedcrt.trialsim import (
    CONTROL,
    INTERVENTION,
    CensoringModel,
    CovariateModel,
    MeasurementModel,
    ScenarioConfig,
    gen_communities,
    gen_individuals,
    generate_trial_communities,
    incidence_cohort,
    km_pair_cv,
    true_community_incidence,
    true_sample_ratio,
    with_overrides,
)


def small_config(**overrides):
    cfg = scenario_a()
    cfg = dataclasses.replace(cfg, size_scale=0.05, master_seed=7)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def test_region_counts_match_design():
    comms = gen_communities(scenario_a())
    assert len(comms) == 32
    counts = {}
    for c in comms:
        counts[c.region] = counts.get(c.region, 0) + 1
    assert counts == {"eastern_uganda": 10, "western_uganda": 10, "kenya": 12}


def test_size_bounds_by_country():
    comms = gen_communities(with_overrides(scenario_a(), master_seed=3))
    for c in comms:
        if c.country == "uganda":
            assert 4000 <= c.size <= 6000
        else:
            assert 3500 <= c.size <= 5480
        assert 0.80 <= c.baseline_coverage <= 0.90
        assert 0.0 < c.prevalence < 1.0
        assert 0.0 < c.mc_coverage < 1.0
        assert np.all(c.hazards >= 0.0)


def test_zero_variance_config_gives_identical_prevalence_within_region():
    cfg = scenario_a()
    cfg = dataclasses.replace(
        cfg,
        covariates=CovariateModel(block_correlation=0.25, scale=0.0),
        prevalence=dataclasses.replace(cfg.prevalence, noise_sd=0.0),
    )
    comms = gen_communities(cfg)
    by_region = {}
    for c in comms:
        by_region.setdefault(c.region, set()).add(round(c.prevalence, 14))
    assert all(len(vals) == 1 for vals in by_region.values())


def test_generation_is_bit_deterministic():
    cfg = small_config()
    a = generate_trial_communities(cfg)
    b = generate_trial_communities(cfg)
    for ca, cb in zip(a, b):
        assert ca.size == cb.size
        assert np.array_equal(ca.covariates, cb.covariates)
        assert np.array_equal(ca.people.infected, cb.people.infected)
        assert np.array_equal(ca.people.censored, cb.people.censored)
        assert np.array_equal(ca.people.observed, cb.people.observed)


def test_monotone_infection_and_censoring():
    comms = generate_trial_communities(small_config())
    for c in comms[:6]:
        for arm in (CONTROL, INTERVENTION):
            inf = c.people.infected[arm].astype(int)
            cen = c.people.censored[arm].astype(int)
            assert np.all(np.diff(inf, axis=1) >= 0)
            assert np.all(np.diff(cen, axis=1) >= 0)


def test_control_arm_interim_measurement_is_zero():
    comms = generate_trial_communities(small_config())
    for c in comms[:6]:
        assert not c.people.observed[CONTROL, :, 1].any()
        assert not c.people.observed[CONTROL, :, 2].any()


def test_censored_implies_unobserved():
    comms = generate_trial_communities(small_config())
    for c in comms:
        for arm in (CONTROL, INTERVENTION):
            both = (c.people.censored[arm] == 1) & (c.people.observed[arm] == 1)
            assert not both.any()


def test_null_couples_arms_exactly():
    cfg = dataclasses.replace(small_config(), effect_null=True)
    comms = generate_trial_communities(cfg)
    for c in comms:
        assert np.array_equal(c.people.infected[0], c.people.infected[1])
    assert true_sample_ratio(comms) == pytest.approx(1.0)


def test_zero_hazards_mean_no_new_infections_and_ratio_undefined():
    cfg = small_config()
    zero = {"uganda": (0.0, 0.0, 0.0), "kenya": (0.0, 0.0, 0.0)}
    cfg = dataclasses.replace(cfg, control_hazard=zero, intervention_hazard=zero)
    comms = generate_trial_communities(cfg)
    for c in comms:
        for arm in (0, 1):
            base = c.people.infected[arm, :, 0]
            assert np.array_equal(c.people.infected[arm, :, 3], base)
    with pytest.raises(ValueError, match="ratio undefined"):
        true_sample_ratio(comms)


def test_full_coverage_no_censoring_everyone_measured():
    cfg = small_config(
        coverage_bounds=(1.0, 1.0),
        censoring=CensoringModel(mode="none"),
        measurement=MeasurementModel(
            mode="noninformative", noninformative_final=1.0, noninformative_interim=1.0
        ),
    )
    comms = generate_trial_communities(cfg)
    for c in comms[:6]:
        for arm in (0, 1):
            assert c.people.observed[arm, :, 0].all()
            assert c.people.observed[arm, :, 3].all()
            assert not c.people.censored[arm].any()


def test_baseline_prevalence_calibration_large_community():
    cfg = small_config(
        size_bounds={"uganda": (100_000, 100_000), "kenya": (100_000, 100_000)},
        size_scale=1.0,
    )
    comms = gen_communities(cfg)
    rng = RngStream(cfg.master_seed)
    community = gen_individuals(comms[0], cfg, rng)
    mean_y0 = community.people.infected[0, :, 0].mean()
    assert abs(mean_y0 - community.prevalence) < 0.02


def test_half_hazard_gives_half_ratio_rare_outcome():
    cfg = scenario_a()
    control = {"uganda": (0.004, 0.004, 0.004), "kenya": (0.004, 0.004, 0.004)}
    interv = {k: tuple(h / 2 for h in v) for k, v in control.items()}
    cfg = dataclasses.replace(
        cfg,
        control_hazard=control,
        intervention_hazard=interv,
        hazard=None,
        size_scale=0.5,
        master_seed=5,
    )
    comms = generate_trial_communities(cfg)
    ratio = true_sample_ratio(comms)
    assert abs(ratio - 0.5) < 0.05 * 0.5 + 0.03  # rare-event approx + MC noise


def test_truth_matches_hand_count_on_toy_community():
    comms = generate_trial_communities(small_config())
    c = comms[0]
    # independent filter-and-count on the raw arrays, first 10 members
    for arm in (0, 1):
        num = den = 0
        for i in range(len(c.people)):
            if c.people.infected[arm, i, 0] == 0 and c.people.observed[arm, i, 0] == 1:
                den += 1
                num += int(c.people.infected[arm, i, 3])
        assert true_community_incidence(c, arm) == pytest.approx(num / den)


def test_cohort_projection_filters_and_ignores_interim():
    comms = generate_trial_communities(small_config())
    c = comms[1]
    arm = 1
    cohort = incidence_cohort(c, arm)
    baseline_neg_measured = (
        (c.people.infected[arm, :, 0] == 0) & (c.people.observed[arm, :, 0] == 1)
    ).sum()
    assert len(cohort) == baseline_neg_measured
    # positives and unmeasured at baseline never appear
    pos_ids = {
        f"{c.id}-{k}"
        for k in np.flatnonzero(c.people.infected[arm, :, 0] == 1)
    }
    assert not pos_ids & set(cohort.ids)

    # scrambling interim states leaves the projection unchanged
    scrambled = dataclasses.replace(c)
    scrambled.people = dataclasses.replace(c.people)
    scrambled.people.infected = c.people.infected.copy()
    scrambled.people.observed = c.people.observed.copy()
    scrambled.people.censored = c.people.censored.copy()
    scrambled.people.infected[arm, :, 1:3] = 1 - scrambled.people.infected[arm, :, 1:3]
    scrambled.people.observed[arm, :, 1:3] = 1 - scrambled.people.observed[arm, :, 1:3]
    other = incidence_cohort(scrambled, arm)
    assert list(other.ids) == list(cohort.ids)
    assert np.array_equal(other.censored, cohort.censored)
    assert np.array_equal(other.measured, cohort.measured)
    assert np.array_equal(other.infected, cohort.infected)


def test_mixture_modes_resolved_per_community():
    cfg = small_config(
        censoring=CensoringModel(mode="mixture"),
        measurement=MeasurementModel(mode="mixture"),
    )
    comms = gen_communities(cfg)
    cmodes = {c.censoring_mode for c in comms}
    mmodes = {c.measurement_mode for c in comms}
    assert cmodes <= {"none", "nondifferential", "differential"}
    assert len(cmodes) >= 2
    assert mmodes <= {
        "noninformative",
        "informative_true_status",
        "informative_known_status",
    }
    assert len(mmodes) >= 2
    again = gen_communities(cfg)
    assert [c.censoring_mode for c in again] == [c.censoring_mode for c in comms]


def test_km_pair_cv_examples():
    pairing = MatchedPairing(pairs=(("a", "b"),), pair_distance=(0.0,), total_distance=0.0)
    assert km_pair_cv(pairing, {"a": 0.01, "b": 0.03}) == pytest.approx(
        math.sqrt(0.0002) / 0.02
    )
    assert km_pair_cv(pairing, {"a": 0.02, "b": 0.02}) == 0.0

    rng = np.random.default_rng(8)
    pairs = tuple((f"x{k}", f"y{k}") for k in range(10))
    pairing = MatchedPairing(pairs=pairs, pair_distance=(0.0,) * 10, total_distance=0.0)
    vals = {}
    for a, b in pairs:
        vals[a] = float(rng.uniform(0.005, 0.03))
        vals[b] = float(rng.uniform(0.005, 0.03))
    expect = math.sqrt(
        sum((vals[a] - vals[b]) ** 2 for a, b in pairs) / (2 * len(pairs))
    ) / np.mean(list(vals.values()))
    assert km_pair_cv(pairing, vals) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        km_pair_cv(pairing, {k: 0.0 for k in vals})


def test_informative_measurement_modes_run():
    for mode in ("informative_true_status", "informative_known_status"):
        cfg = small_config(measurement=MeasurementModel(mode=mode))
        comms = generate_trial_communities(cfg)
        seen = np.concatenate([c.people.observed[1, :, 3] for c in comms])
        assert 0.4 < seen.mean() < 0.95


def test_differential_censoring_hits_positives_harder_in_control():
    cfg = small_config(
        size_scale=0.5,
        censoring=CensoringModel(
            mode="differential",
            differential_control=(0.02, 0.20),
            differential_intervention=(0.02, 0.02),
        ),
    )
    comms = generate_trial_communities(cfg)
    pos = np.concatenate(
        [c.people.censored[0, c.people.infected[0, :, 3] == 1, 3] for c in comms]
    )
    neg = np.concatenate(
        [c.people.censored[0, c.people.infected[0, :, 3] == 0, 3] for c in comms]
    )
    assert pos.mean() > neg.mean() + 0.1


def test_config_validation_errors():
    cfg = scenario_a()
    with pytest.raises(ValueError, match="odd"):
        dataclasses.replace(
            cfg, regions=(dataclasses.replace(cfg.regions[0], n_communities=9),)
        ).validate()
    with pytest.raises(ValueError, match="size_scale"):
        dataclasses.replace(cfg, size_scale=0.0).validate()
    with pytest.raises(ValueError, match="probabilities"):
        dataclasses.replace(
            cfg, censoring=CensoringModel(nondifferential_annual=1.5)
        ).validate()


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")
def test_kernel_backends_bit_identical():
    if not _kernels.USE_NUMBA:
        pytest.skip("numba disabled via PAIREDCRT_NO_NUMBA")
    rng = np.random.default_rng(99)
    n = 4000
    args = dict(
        u_inf=rng.random((n, 4)),
        u_cens=rng.random((n, 3)),
        u_meas=rng.random((n, 4)),
        p_prevalent=rng.uniform(0.01, 0.3, n),
        p_base_meas=rng.uniform(0.7, 0.95, n),
        p_inf=rng.uniform(0.0, 0.05, (n, 3)),
        p_cens_neg=rng.uniform(0.0, 0.05, 3),
        p_cens_pos=rng.uniform(0.0, 0.08, 3),
        p_meas_neg=np.array([0.0, 0.7, 0.75]),
        p_meas_pos=np.array([0.0, 0.8, 0.85]),
    )
    for on_known in (False, True):
        jit_out = _kernels._histories_jit(
            **{k: np.ascontiguousarray(v) for k, v in args.items()},
            measurement_on_known=on_known,
        )
        np_out = _kernels._histories_numpy(**args, measurement_on_known=on_known)
        for a, b in zip(jit_out, np_out):
            assert np.array_equal(a, b)
