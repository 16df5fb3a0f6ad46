"""File formats: scenario YAML, trial CSVs, and JSON reports.

All writers are deterministic (sorted JSON keys, ``\\n`` line endings,
full-precision floats via ``repr``) so identical inputs give
byte-identical files; floats survive a write/read round trip exactly.

communities.csv columns:
    id, region, pair_id, arm, e1..e9, baseline_prevalence, mc_coverage,
    y, denominator
individuals.csv columns:
    id, community_id, age_group, male, circumcised, c, delta, i
    (i is empty when delta is 0)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import presets
from .stage1 import Cohort
from .stage2 import CommunityRecord, EffectEstimate
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

__all__ = [
    "effect_to_dict",
    "load_scenario",
    "read_communities_csv",
    "read_individuals_csv",
    "read_pairing_csv",
    "scenario_from_dict",
    "scenario_to_dict",
    "write_communities_csv",
    "write_individuals_csv",
    "write_json",
    "write_pairing_csv",
]

E_COLUMNS = tuple(f"e{i}" for i in range(1, 10))
COMMUNITY_COLUMNS = (
    ("id", "region", "pair_id", "arm")
    + E_COLUMNS
    + ("baseline_prevalence", "mc_coverage", "y", "denominator")
)
INDIVIDUAL_COLUMNS = ("id", "community_id", "age_group", "male", "circumcised", "c", "delta", "i")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ---------------------------------------------------------------------------
# scenario config <-> dict <-> yaml


def scenario_to_dict(config: ScenarioConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, Mapping):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj

    return plain(config)


def scenario_from_dict(data: Mapping) -> ScenarioConfig:
    def pairs(mapping):
        return {k: tuple(v) for k, v in mapping.items()}

    def build(cls, section, tuple_fields=()):
        if section is None:
            return None
        kwargs = dict(section)
        for name in tuple_fields:
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)

    config = ScenarioConfig(
        name=data["name"],
        regions=tuple(RegionSpec(**r) for r in data["regions"]),
        size_bounds=pairs(data["size_bounds"]),
        coverage_bounds=tuple(data["coverage_bounds"]),
        control_hazard=pairs(data["control_hazard"]),
        intervention_hazard=pairs(data["intervention_hazard"]),
        covariates=build(CovariateModel, data.get("covariates")) or CovariateModel(),
        prevalence=build(LogitLinearModel, data.get("prevalence"), ("coefficients",)),
        circumcision=build(LogitLinearModel, data.get("circumcision"), ("coefficients",)),
        hazard=build(HazardModel, data.get("hazard"), ("coefficients",)),
        individuals=build(
            IndividualModel,
            data.get("individuals"),
            ("age_probs", "age_prevalence_shift", "age_hazard_log"),
        )
        or IndividualModel(),
        censoring=build(
            CensoringModel,
            data.get("censoring"),
            ("differential_control", "differential_intervention"),
        )
        or CensoringModel(),
        measurement=build(
            MeasurementModel,
            data.get("measurement"),
            (
                "informative_final_control",
                "informative_final_intervention",
                "informative_interim_intervention",
            ),
        )
        or MeasurementModel(),
        effect_null=bool(data.get("effect_null", False)),
        master_seed=int(data.get("master_seed", 0)),
        size_scale=float(data.get("size_scale", 1.0)),
    )
    config.validate()
    return config


def load_scenario(name_or_path: str) -> ScenarioConfig:
    """Resolve a preset name, or read a scenario YAML/JSON file."""
    if name_or_path in presets.PRESETS:
        return presets.preset_scenario(name_or_path)
    if not os.path.exists(name_or_path):
        raise ValueError(
            f"{name_or_path!r} is neither a preset ({', '.join(presets.PRESETS)}) "
            "nor an existing file"
        )
    with open(name_or_path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(yaml.safe_load(fh))


def save_scenario(config: ScenarioConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario_to_dict(config), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# trial CSVs


def write_communities_csv(path: str, records: Sequence[CommunityRecord], denominators: Mapping[str, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMMUNITY_COLUMNS)
        for rec in records:
            row = [rec.id, rec.region, rec.pair_id, rec.arm]
            row += [_fmt(rec.covariates[c]) for c in E_COLUMNS]
            row += [
                _fmt(rec.covariates["baseline_prevalence"]),
                _fmt(rec.covariates["mc_coverage"]),
                _fmt(rec.outcome),
                str(int(denominators[rec.id])),
            ]
            writer.writerow(row)


def read_communities_csv(path: str, weighting: str = "equal") -> list[CommunityRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(COMMUNITY_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            covariates = {c: float(row[c]) for c in E_COLUMNS}
            covariates["baseline_prevalence"] = float(row["baseline_prevalence"])
            covariates["mc_coverage"] = float(row["mc_coverage"])
            denominator = int(row["denominator"])
            weight = float(denominator) if weighting == "size" else 1.0
            records.append(
                CommunityRecord(
                    id=row["id"],
                    region=row["region"],
                    pair_id=row["pair_id"],
                    covariates=covariates,
                    arm=int(row["arm"]),
                    outcome=float(row["y"]),
                    weight=weight,
                )
            )
    return records


def write_individuals_csv(path: str, cohorts: Mapping[str, Cohort]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDIVIDUAL_COLUMNS)
        for community_id in sorted(cohorts):
            cohort = cohorts[community_id]
            for i, rid in enumerate(cohort.ids):
                delta = int(cohort.measured[i])
                writer.writerow(
                    [
                        rid,
                        community_id,
                        str(int(cohort.covariates["age_group"][i])),
                        str(int(cohort.covariates["male"][i])),
                        str(int(cohort.covariates["circumcised"][i])),
                        str(int(cohort.censored[i])),
                        str(delta),
                        str(int(cohort.infected[i])) if delta else "",
                    ]
                )


def read_individuals_csv(path: str) -> dict[str, Cohort]:
    rows_by_community: dict[str, list[dict]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(INDIVIDUAL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rows_by_community.setdefault(row["community_id"], []).append(row)
    cohorts = {}
    for community_id, rows in rows_by_community.items():
        measured = np.array([int(r["delta"]) for r in rows], dtype=np.uint8)
        infected = np.array(
            [int(r["i"]) if r["i"] != "" else -1 for r in rows], dtype=np.int8
        )
        cohorts[community_id] = Cohort(
            ids=[r["id"] for r in rows],
            covariates={
                "age_group": np.array([float(r["age_group"]) for r in rows]),
                "male": np.array([float(r["male"]) for r in rows]),
                "circumcised": np.array([float(r["circumcised"]) for r in rows]),
            },
            censored=np.array([int(r["c"]) for r in rows], dtype=np.uint8),
            measured=measured,
            infected=infected,
        )
    return cohorts


def write_pairing_csv(path: str, pairing) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("pair_id", "community_a", "community_b", "distance"))
        for k, ((a, b), d) in enumerate(zip(pairing.pairs, pairing.pair_distance)):
            writer.writerow((f"p{k:02d}", a, b, _fmt(d)))


def read_pairing_csv(path: str):
    from .matchpairs import MatchedPairing

    pairs, dists = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append((row["community_a"], row["community_b"]))
            dists.append(float(row["distance"]))
    return MatchedPairing(
        pairs=tuple(pairs), pair_distance=tuple(dists), total_distance=float(sum(dists))
    )


# ---------------------------------------------------------------------------
# JSON reports


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value]
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(path: str, payload: Mapping) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def effect_to_dict(est: EffectEstimate) -> dict:
    out = dataclasses.asdict(est)
    out["unit_ids"] = list(est.unit_ids)
    out["influence"] = [float(v) for v in est.influence]
    out["warnings"] = list(est.warnings)
    return out
