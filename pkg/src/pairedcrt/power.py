"""Sample-size and detectable-effect calculations for pair-matched
cluster randomized trials with binary outcomes (Hayes-Moulton style).

The number of pairs needed to detect a drop from control incidence
``pi0`` to intervention incidence ``pi1`` with ``m`` measured
individuals per community is

    c = 2 + (z_alpha/2 + z_beta)^2
          * [ (pi0(1-pi0) + pi1(1-pi1))/m + km^2 (pi0^2 + pi1^2) ]
          / (pi0 - pi1)^2

where ``km`` is the matched-pair coefficient of variation. The "+2"
term is the standard matched-design correction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .numkit import norm_quantile

__all__ = ["PowerSpec", "pairs_required", "detectable_reduction", "drop_pair_tradeoff"]


@dataclass(frozen=True)
class PowerSpec:
    """Design inputs for the power calculation.

    m is the number of individuals per community with the outcome
    measured at follow-up, pi0 the control-arm cumulative incidence.
    """

    pairs: int
    m: float
    pi0: float
    km: float
    alpha: float = 0.05
    power: float = 0.80

    def __post_init__(self):
        if self.pairs < 2:
            raise ValueError("pairs must be >= 2")
        if self.m <= 0:
            raise ValueError("m must be positive")
        if not 0.0 < self.pi0 < 1.0:
            raise ValueError("pi0 must be in (0, 1)")
        if self.km < 0.0:
            raise ValueError("km must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 < self.power < 1.0:
            raise ValueError("power must be in (0, 1)")


def pairs_required(spec: PowerSpec, pi1: float) -> float:
    """Unrounded number of matched pairs needed to detect pi0 -> pi1."""
    if not 0.0 < pi1 < spec.pi0:
        raise ValueError("pi1 must be in (0, pi0)")
    z = norm_quantile(1.0 - spec.alpha / 2.0) + norm_quantile(spec.power)
    pi0, pi1 = spec.pi0, pi1
    binom = (pi0 * (1.0 - pi0) + pi1 * (1.0 - pi1)) / spec.m
    between = spec.km**2 * (pi0**2 + pi1**2)
    return 2.0 + z**2 * (binom + between) / (pi0 - pi1) ** 2


def detectable_reduction(spec: PowerSpec, *, tol: float = 1e-9) -> float:
    """Smallest relative reduction detectable with the requested power.

    Solved by bisection on r in (0, 1), using the monotone decrease of
    ``pairs_required`` in the effect size. Raises if even a reduction
    arbitrarily close to 100% needs more pairs than the design has.
    """
    lo, hi = 1e-9, 1.0 - 1e-9

    def needed(r: float) -> float:
        return pairs_required(spec, spec.pi0 * (1.0 - r)) - spec.pairs

    if needed(hi) > 0.0:
        raise ValueError("underpowered design: no detectable reduction in (0, 1)")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if needed(mid) <= 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def drop_pair_tradeoff(spec: PowerSpec, km_reduced: float) -> tuple[float, float]:
    """Detectable reductions with all pairs versus one pair dropped.

    Dropping a poorly matched pair costs one independent unit but
    lowers the pair coefficient of variation to ``km_reduced``; the
    return value (r_full, r_dropped) quantifies that trade.
    """
    if km_reduced > spec.km:
        raise ValueError("km_reduced must not exceed spec.km")
    r_full = detectable_reduction(spec)
    r_dropped = detectable_reduction(
        replace(spec, pairs=spec.pairs - 1, km=km_reduced)
    )
    return r_full, r_dropped
