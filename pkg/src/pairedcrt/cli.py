"""Command-line entry points.

Subcommands: ``power``, ``match``, ``simulate``, ``analyze``,
``replicate``. Exit codes: 0 on success, 1 on analysis errors, 2 on
usage errors. All randomness is governed by ``--seed``; every command
is deterministic given its flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import dataio, power, replicate, stage1, trialsim
from .matchpairs import MatchCandidate, optimal_pairs_within_region
from .presets import preset_names

_GRID_PARAMS = ("pi0", "km", "m", "pairs")


def _grid_values(spec: str) -> tuple[str, list[float]]:
    try:
        name, rng = spec.split("=", 1)
        start, stop, step = (float(v) for v in rng.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bad grid spec {spec!r}; expected name=start:stop:step"
        ) from None
    if name not in _GRID_PARAMS:
        raise argparse.ArgumentTypeError(
            f"grid parameter must be one of {_GRID_PARAMS}, got {name!r}"
        )
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError(f"bad grid range in {spec!r}")
    values = []
    k = 0
    while start + k * step <= stop + 1e-12:
        values.append(start + k * step)
        k += 1
    return name, values


def _write_rows(path: str | None, header: tuple[str, ...], rows) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_power(args) -> int:
    spec = power.PowerSpec(
        pairs=args.pairs, m=args.m, pi0=args.pi0, km=args.km,
        alpha=args.alpha, power=args.power,
    )
    if args.pi1 is not None:
        needed = power.pairs_required(spec, args.pi1)
        print(f"pairs required for pi1={args.pi1:g}: {needed:.3f}")
    reduction = power.detectable_reduction(spec)
    print(f"detectable reduction at {args.power:.0%} power: {reduction:.4f}")

    grids = dict(args.grid or ())
    base = {"pi0": args.pi0, "km": args.km, "m": args.m, "pairs": args.pairs}
    if grids:
        axes = [(name, grids.get(name, [base[name]])) for name in _GRID_PARAMS]
        rows = []

        def expand(idx, current):
            if idx == len(axes):
                s = power.PowerSpec(
                    pairs=int(round(current["pairs"])), m=current["m"],
                    pi0=current["pi0"], km=current["km"],
                    alpha=args.alpha, power=args.power,
                )
                rows.append(
                    [repr(current["pi0"]), repr(current["km"]), repr(current["m"]),
                     str(int(round(current["pairs"]))),
                     repr(power.detectable_reduction(s))]
                )
                return
            name, values = axes[idx]
            for v in values:
                current[name] = v
                expand(idx + 1, current)

        expand(0, dict(base))
        _write_rows(args.out, ("pi0", "km", "m", "pairs", "detectable_reduction"), rows)
    return 0


def cmd_match(args) -> int:
    records = dataio.read_communities_csv(args.communities)
    match_vars = [v.strip() for v in args.vars.split(",") if v.strip()]
    candidates = [MatchCandidate(r.id, r.region, r.covariates) for r in records]
    pairing = optimal_pairs_within_region(candidates, match_vars)
    dataio.write_pairing_csv(args.out, pairing) if args.out else None
    for k, ((a, b), d) in enumerate(zip(pairing.pairs, pairing.pair_distance)):
        print(f"p{k:02d}: {a} <-> {b}  distance {d:.4f}")
    print(f"total distance: {pairing.total_distance:.4f}")
    return 0


def _load_scenario(args) -> trialsim.ScenarioConfig:
    config = dataio.load_scenario(args.scenario)
    return trialsim.with_overrides(
        config,
        master_seed=args.seed,
        size_scale=args.scale,
        effect_null=True if getattr(args, "null", False) else None,
    )


def cmd_simulate(args) -> int:
    config = _load_scenario(args)
    trial = replicate.run_trial(config, weighting="equal")
    os.makedirs(args.out_dir, exist_ok=True)
    dataio.write_communities_csv(
        os.path.join(args.out_dir, "communities.csv"), trial.records, trial.denominators
    )
    dataio.write_individuals_csv(
        os.path.join(args.out_dir, "individuals.csv"), trial.cohorts
    )
    dataio.write_json(
        os.path.join(args.out_dir, "truth.json"),
        {
            "scenario": config.name,
            "master_seed": config.master_seed,
            "size_scale": config.size_scale,
            "effect_null": config.effect_null,
            "mean_intervention": trial.truth.mean_intervention,
            "mean_control": trial.truth.mean_control,
            "ratio": trial.truth.ratio,
            "pair_cv": trial.truth.pair_cv,
        },
    )
    print(
        f"wrote {args.out_dir}/communities.csv, individuals.csv, truth.json "
        f"(true ratio {trial.truth.ratio:.4f})"
    )
    return 0


def _print_effect(est) -> None:
    print(f"estimator:          {est.estimator}")
    print(f"intervention mean:  {est.mean_intervention:.6f}")
    print(f"control mean:       {est.mean_control:.6f}")
    print(f"ratio:              {est.ratio:.4f}")
    print(f"95% CI:             ({est.ci_lower:.4f}, {est.ci_upper:.4f})")
    print(f"p-value:            {est.p_value:.4f}  (t with {est.df} df)")
    print(f"risk difference:    {est.risk_difference:.6f} "
          f"({est.rd_ci_lower:.6f}, {est.rd_ci_upper:.6f})")
    if est.selected_outcome_var or est.selected_arm_var:
        print(f"selected adjustment: outcome={est.selected_outcome_var} "
              f"arm={est.selected_arm_var}")
    if est.dropped_pair:
        print(f"dropped pair:       {est.dropped_pair}")
    for note in est.warnings:
        print(f"warning: {note}")


def cmd_analyze(args) -> int:
    records = dataio.read_communities_csv(args.communities, weighting=args.weighting)
    if args.individuals:
        cohorts = dataio.read_individuals_csv(args.individuals)
        stage1_adjust = [v for v in (args.stage1_adjust or "").split(",") if v]
        updated = []
        for rec in records:
            cohort = cohorts.get(rec.id)
            if cohort is None:
                raise ValueError(f"no individual records for community {rec.id!r}")
            if stage1_adjust:
                outcome = stage1.cumulative_incidence_tmle(cohort, stage1_adjust)
            else:
                outcome, _ = stage1.cumulative_incidence_empirical(cohort)
            updated.append(dataclasses.replace(rec, outcome=outcome))
        records = updated
    est = replicate.analyze_communities(
        records,
        args.estimator,
        alpha=args.alpha,
        outcome_var=args.outcome_var,
        arm_var=args.arm_var,
        drop_var=args.drop_var,
    )
    _print_effect(est)
    if args.out:
        dataio.write_json(args.out, dataio.effect_to_dict(est))
    return 0


def cmd_replicate(args) -> int:
    config = _load_scenario(args)
    estimators = [v.strip() for v in args.estimators.split(",") if v.strip()]
    report = replicate.run_replicates(
        config,
        args.reps,
        estimators,
        alpha=args.alpha,
        weighting=args.weighting,
        jobs=args.jobs,
    )
    print(
        f"scenario {report.scenario}  replicates {report.n_replicates}  "
        f"scale {report.size_scale:g}  true ratio {report.mean_true_ratio:.4f}  "
        f"pair CV {report.mean_pair_cv:.3f}"
    )
    for name, s in report.estimators.items():
        print(
            f"  {name:<12} bias {s.bias_ratio:+.2e}  se {s.mean_se:.4f}  "
            f"tstat {s.mean_tstat:+.2f}  cover {s.coverage:.3f}  "
            f"reject {s.reject_rate:.3f}  failed {s.n_failed}"
        )
    if args.out:
        dataio.write_json(args.out, report.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairedcrt",
        description=(
            "Design, simulate, and analyze pair-matched two-arm cluster "
            "randomized trials with rare binary outcomes."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("power", help="Hayes-Moulton detectable-effect calculator")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--m", type=float, required=True,
                   help="measured individuals per community")
    p.add_argument("--pi0", type=float, required=True,
                   help="control-arm cumulative incidence")
    p.add_argument("--km", type=float, required=True,
                   help="matched-pair coefficient of variation")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.80)
    p.add_argument("--pi1", type=float, default=None,
                   help="also report pairs required for this incidence")
    p.add_argument("--grid", type=_grid_values, action="append",
                   help="curve grid, e.g. km=0.2:0.4:0.05 (repeatable)")
    p.add_argument("--out", default=None, help="write grid CSV here")
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("match", help="optimal within-region pair matching")
    p.add_argument("--communities", required=True, help="communities.csv")
    p.add_argument("--vars", required=True, help="comma-separated covariates")
    p.add_argument("--out", default=None, help="write pairing CSV here")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("simulate", help="generate one synthetic trial")
    p.add_argument("--scenario", required=True,
                   help=f"preset ({', '.join(preset_names())}) or YAML path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=float, default=None,
                   help="multiply community sizes by this factor")
    p.add_argument("--null", action="store_true",
                   help="force intervention hazards equal to control")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="estimate the intervention effect")
    p.add_argument("--communities", required=True)
    p.add_argument("--individuals", default=None,
                   help="recompute community outcomes from individual records")
    p.add_argument("--estimator", default="adaptive",
                   choices=replicate.ESTIMATOR_NAMES)
    p.add_argument("--outcome-var", default=None,
                   help="adjustment covariate for estimator=tmle")
    p.add_argument("--arm-var", default=None,
                   help="arm-mechanism covariate for estimator=tmle")
    p.add_argument("--drop-var", default="baseline_prevalence",
                   help="discrepancy covariate for estimator=drop_pair")
    p.add_argument("--weighting", default="equal", choices=("equal", "size"))
    p.add_argument("--stage1-adjust", default=None,
                   help="comma-separated covariates for adjusted community outcomes")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=None, help="write report JSON here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("replicate", help="Monte-Carlo operating characteristics")
    p.add_argument("--scenario", required=True,
                   help=f"preset ({', '.join(preset_names())}) or YAML path")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--estimators", default="unadjusted,adaptive")
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--null", action="store_true")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--weighting", default="equal", choices=("equal", "size"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="write report JSON here")
    p.set_defaults(func=cmd_replicate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
