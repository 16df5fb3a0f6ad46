"""Optimal pair-matching of communities within region.

Candidates are partitioned region by region into pairs minimizing the
total within-pair covariate distance. Regions in this design hold at
most 16 communities, so the minimum-weight perfect matching is solved
exactly with dynamic programming over member subsets instead of a
heuristic matcher; results are deterministic, with ties broken toward
the lexicographically smallest pair list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "MatchCandidate",
    "MatchedPairing",
    "covariate_distance",
    "optimal_pairs_within_region",
    "pair_discrepancy",
]

_MAX_REGION_SIZE = 16


@dataclass(frozen=True)
class MatchCandidate:
    """Minimal view of a community used by the matcher."""

    id: str
    region: str
    covariates: Mapping[str, float]


@dataclass(frozen=True)
class MatchedPairing:
    """A partition of communities into within-region pairs.

    ``pairs[k]`` holds the two community ids of pair ``k`` (members in
    id order) and ``pair_distance[k]`` the standardized Euclidean
    distance between them.
    """

    pairs: tuple[tuple[str, str], ...]
    pair_distance: tuple[float, ...]
    total_distance: float

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def community_ids(self) -> tuple[str, ...]:
        return tuple(cid for pair in self.pairs for cid in pair)


def covariate_distance(a, b, scales) -> float:
    """Euclidean distance between componentwise-standardized vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scales = np.asarray(scales, dtype=float)
    if not (a.shape == b.shape == scales.shape):
        raise ValueError("vectors and scales must have equal length")
    if np.any(scales <= 0.0) or not np.all(np.isfinite(scales)):
        raise ValueError("scales must be positive and finite")
    return float(np.sqrt(np.sum(((a - b) / scales) ** 2)))


def _covariate_matrix(communities: Sequence, match_vars: Sequence[str]) -> np.ndarray:
    rows = []
    for c in communities:
        try:
            rows.append([float(c.covariates[v]) for v in match_vars])
        except KeyError as exc:
            raise ValueError(f"community {c.id!r} is missing covariate {exc}") from None
    x = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite matching covariates")
    return x


def _min_weight_pairing(dist: np.ndarray) -> list[tuple[int, int]]:
    """Exact minimum-weight perfect matching by subset DP.

    Tie-break: when several optimal partners exist for the lowest
    unmatched index, the smallest partner index is chosen, which makes
    the emitted pair list lexicographically smallest among optima.
    """
    n = dist.shape[0]
    full = (1 << n) - 1
    dp = np.full(1 << n, np.inf)
    dp[0] = 0.0
    for mask in range(1, full + 1):
        if bin(mask).count("1") % 2:
            continue
        i = (mask & -mask).bit_length() - 1
        rest = mask ^ (1 << i)
        best = np.inf
        m = rest
        while m:
            jbit = m & -m
            j = jbit.bit_length() - 1
            m ^= jbit
            v = dp[rest ^ jbit] + dist[i, j]
            if v < best:
                best = v
        dp[mask] = best

    pairs: list[tuple[int, int]] = []
    mask = full
    while mask:
        i = (mask & -mask).bit_length() - 1
        rest = mask ^ (1 << i)
        tol = 1e-9 * (1.0 + abs(dp[mask]))
        chosen = -1
        m = rest
        while m:
            jbit = m & -m
            j = jbit.bit_length() - 1
            m ^= jbit
            if dp[rest ^ jbit] + dist[i, j] <= dp[mask] + tol:
                chosen = j
                break  # bits iterate in ascending order
        pairs.append((i, chosen))
        mask = rest ^ (1 << chosen)
    return pairs


def optimal_pairs_within_region(
    communities: Sequence, match_vars: Sequence[str]
) -> MatchedPairing:
    """Minimum-total-distance pairing of communities, region by region.

    ``communities`` may be any objects exposing ``id``, ``region`` and a
    ``covariates`` mapping (see :class:`MatchCandidate`). Distances use
    covariates standardized by the standard deviation of the full
    candidate pool. Every region must contain an even number (at most
    16) of communities.
    """
    if not communities:
        raise ValueError("no communities to match")
    ids = [c.id for c in communities]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate community ids")
    match_vars = list(match_vars)
    if not match_vars:
        raise ValueError("no matching covariates given")

    pool = _covariate_matrix(communities, match_vars)
    scales = pool.std(axis=0, ddof=1)
    bad = [v for v, s in zip(match_vars, scales) if not np.isfinite(s) or s <= 0.0]
    if bad:
        raise ValueError(f"matching covariates with zero variance in pool: {bad}")

    by_region: dict[str, list] = {}
    for c in communities:
        by_region.setdefault(c.region, []).append(c)

    all_pairs: list[tuple[str, str]] = []
    all_dists: list[float] = []
    for region in sorted(by_region):
        members = sorted(by_region[region], key=lambda c: c.id)
        n = len(members)
        if n % 2:
            raise ValueError(f"region {region!r} has an odd number of communities ({n})")
        if n > _MAX_REGION_SIZE:
            raise ValueError(
                f"region {region!r} has {n} communities; "
                f"exact matching supports at most {_MAX_REGION_SIZE}"
            )
        x = _covariate_matrix(members, match_vars) / scales
        diff = x[:, None, :] - x[None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=2))
        for i, j in _min_weight_pairing(dist):
            all_pairs.append((members[i].id, members[j].id))
            all_dists.append(float(dist[i, j]))

    return MatchedPairing(
        pairs=tuple(all_pairs),
        pair_distance=tuple(all_dists),
        total_distance=float(sum(all_dists)),
    )


def pair_discrepancy(
    pairing: MatchedPairing, communities: Sequence, var: str
) -> list[float]:
    """Absolute within-pair difference of one covariate, in pairing order."""
    values: dict[str, float] = {}
    for c in communities:
        if var not in c.covariates:
            raise ValueError(f"community {c.id!r} is missing covariate {var!r}")
        values[c.id] = float(c.covariates[var])
    out = []
    for a, b in pairing.pairs:
        try:
            out.append(abs(values[a] - values[b]))
        except KeyError as exc:
            raise ValueError(f"pairing references unknown community {exc}") from None
    return out
