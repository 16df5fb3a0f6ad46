"""Hot simulation kernels: per-individual longitudinal state updates.

Given pre-drawn uniforms and pre-computed event probabilities, the
kernel walks each individual through four annual rounds of infection,
censoring and measurement. It is the inner loop of the Monte-Carlo
replicate harness, so it ships in two interchangeable forms:

* a numba ``@njit`` version (default when numba imports), and
* a vectorized pure-numpy fallback.

Set ``PAIREDCRT_NO_NUMBA=1`` to force the numpy path. Both backends
apply only comparisons and boolean updates to the same float64 inputs
(all transcendental math happens upstream), so their outputs are
bit-identical; ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["simulate_histories", "active_backend", "HAVE_NUMBA", "USE_NUMBA"]

_DISABLED = os.environ.get("PAIREDCRT_NO_NUMBA", "").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _histories_loop(
    u_inf,
    u_cens,
    u_meas,
    p_prevalent,
    p_base_meas,
    p_inf,
    p_cens_neg,
    p_cens_pos,
    p_meas_neg,
    p_meas_pos,
    measurement_on_known,
):
    n = p_prevalent.shape[0]
    infected = np.zeros((n, 4), dtype=np.uint8)
    censored = np.zeros((n, 4), dtype=np.uint8)
    observed = np.zeros((n, 4), dtype=np.uint8)
    for i in range(n):
        infected[i, 0] = 1 if u_inf[i, 0] < p_prevalent[i] else 0
        observed[i, 0] = 1 if u_meas[i, 0] < p_base_meas[i] else 0
        known = 1 if (infected[i, 0] == 1 and observed[i, 0] == 1) else 0
        for t in range(1, 4):
            if infected[i, t - 1] == 1:
                infected[i, t] = 1
            elif u_inf[i, t] < p_inf[i, t - 1]:
                infected[i, t] = 1
            pc = p_cens_pos[t - 1] if infected[i, t] == 1 else p_cens_neg[t - 1]
            if censored[i, t - 1] == 1 or u_cens[i, t - 1] < pc:
                censored[i, t] = 1
            status = known if measurement_on_known else infected[i, t]
            pm = p_meas_pos[t - 1] if status == 1 else p_meas_neg[t - 1]
            if censored[i, t] == 0 and u_meas[i, t] < pm:
                observed[i, t] = 1
            if observed[i, t] == 1 and infected[i, t] == 1:
                known = 1
    return infected, censored, observed


def _histories_numpy(
    u_inf,
    u_cens,
    u_meas,
    p_prevalent,
    p_base_meas,
    p_inf,
    p_cens_neg,
    p_cens_pos,
    p_meas_neg,
    p_meas_pos,
    measurement_on_known,
):
    n = p_prevalent.shape[0]
    infected = np.zeros((n, 4), dtype=np.uint8)
    censored = np.zeros((n, 4), dtype=np.uint8)
    observed = np.zeros((n, 4), dtype=np.uint8)
    infected[:, 0] = u_inf[:, 0] < p_prevalent
    observed[:, 0] = u_meas[:, 0] < p_base_meas
    known = infected[:, 0] & observed[:, 0]
    for t in range(1, 4):
        new_inf = (infected[:, t - 1] == 0) & (u_inf[:, t] < p_inf[:, t - 1])
        infected[:, t] = infected[:, t - 1] | new_inf
        pc = np.where(infected[:, t] == 1, p_cens_pos[t - 1], p_cens_neg[t - 1])
        censored[:, t] = censored[:, t - 1] | (u_cens[:, t - 1] < pc)
        status = known if measurement_on_known else infected[:, t]
        pm = np.where(status == 1, p_meas_pos[t - 1], p_meas_neg[t - 1])
        observed[:, t] = (censored[:, t] == 0) & (u_meas[:, t] < pm)
        known = known | (observed[:, t] & infected[:, t])
    return infected, censored, observed


if USE_NUMBA:
    _histories_jit = njit(cache=True)(_histories_loop)
else:
    _histories_jit = None


def active_backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def simulate_histories(
    u_inf,
    u_cens,
    u_meas,
    p_prevalent,
    p_base_meas,
    p_inf,
    p_cens_neg,
    p_cens_pos,
    p_meas_neg,
    p_meas_pos,
    measurement_on_known: bool,
):
    """Four-round infection/censoring/measurement histories for one arm.

    Inputs (all float64):
        u_inf (n, 4), u_cens (n, 3), u_meas (n, 4): uniforms, shared
            across arms for common-random-number coupling.
        p_prevalent (n,): baseline infection probability.
        p_base_meas (n,): baseline measurement probability.
        p_inf (n, 3): per-year infection probability while at risk.
        p_cens_neg/pos (3,): annual censoring hazard by current status.
        p_meas_neg/pos (3,): annual measurement probability by status
            (already zeroed for control-arm interim years).
        measurement_on_known: measurement depends on previously observed
            positive status instead of the underlying current status.

    Returns uint8 arrays (infected, censored, observed), each (n, 4),
    monotone in the year index for infection and censoring.
    """
    u_inf = np.ascontiguousarray(u_inf, dtype=np.float64)
    u_cens = np.ascontiguousarray(u_cens, dtype=np.float64)
    u_meas = np.ascontiguousarray(u_meas, dtype=np.float64)
    p_prevalent = np.ascontiguousarray(p_prevalent, dtype=np.float64)
    p_base_meas = np.ascontiguousarray(p_base_meas, dtype=np.float64)
    p_inf = np.ascontiguousarray(p_inf, dtype=np.float64)
    p_cens_neg = np.ascontiguousarray(p_cens_neg, dtype=np.float64)
    p_cens_pos = np.ascontiguousarray(p_cens_pos, dtype=np.float64)
    p_meas_neg = np.ascontiguousarray(p_meas_neg, dtype=np.float64)
    p_meas_pos = np.ascontiguousarray(p_meas_pos, dtype=np.float64)
    n = p_prevalent.shape[0]
    if u_inf.shape != (n, 4) or u_cens.shape != (n, 3) or u_meas.shape != (n, 4):
        raise ValueError("uniform arrays have inconsistent shapes")
    if p_inf.shape != (n, 3):
        raise ValueError(f"p_inf has shape {p_inf.shape}, expected ({n}, 3)")
    fn = _histories_jit if USE_NUMBA else _histories_numpy
    return fn(
        u_inf,
        u_cens,
        u_meas,
        p_prevalent,
        p_base_meas,
        p_inf,
        p_cens_neg,
        p_cens_pos,
        p_meas_neg,
        p_meas_pos,
        bool(measurement_on_known),
    )
