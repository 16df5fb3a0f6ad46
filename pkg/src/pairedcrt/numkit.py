"""Shared numerical kernels.

Everything downstream (community-level regressions, targeting steps,
trial simulation) is built on the four primitives in this module:

* weighted quasi-binomial logistic regression fit by iteratively
  reweighted least squares (fractional responses in [0, 1] are allowed
  so that community-level proportions can be regressed directly),
* logistic link helpers,
* Student-t / normal quantiles,
* multivariate-normal sampling and reproducible seeded RNG streams.

All functions are pure: output depends only on the inputs (and, for
sampling, on the explicit stream), so they are safe to call from
parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special
import scipy.stats

__all__ = [
    "GlmFit",
    "RngStream",
    "SingularMatrixError",
    "expit",
    "fit_logistic",
    "logit",
    "mvn_sample",
    "norm_quantile",
    "t_cdf",
    "t_quantile",
]

# Linear predictors beyond this magnitude mean fitted probabilities are
# numerically 0 or 1: the quasi-likelihood has no interior maximum
# (separation), so the fit is flagged as non-converged.
_ETA_LIMIT = 30.0


class SingularMatrixError(np.linalg.LinAlgError):
    """Working information matrix became singular during IRLS."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(
            f"singular working matrix at IRLS iteration {iteration}"
        )


@dataclass(frozen=True)
class GlmFit:
    """Result of a logistic-regression fit (intercept handled by caller).

    ``coefficients`` are the last finite iterate even when
    ``converged`` is False, so callers can decide whether a separated
    fit is still usable.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float

    def linear_predictor(self, design, offset=None) -> np.ndarray:
        design = np.atleast_2d(np.asarray(design, dtype=float))
        eta = design @ self.coefficients
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, design, offset=None) -> np.ndarray:
        """Fitted probabilities for a design matrix (plus optional offset)."""
        return expit(self.linear_predictor(design, offset))


def expit(x):
    """Inverse logit, stable for large |x|."""
    return scipy.special.expit(x)


def logit(p):
    """Log-odds. Raises on boundary values; callers must bound first."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit requires probabilities in the open interval (0, 1)")
    out = scipy.special.logit(p)
    return float(out) if out.ndim == 0 else out


def _deviance(y: np.ndarray, mu: np.ndarray, w: np.ndarray) -> float:
    # Quasi-binomial deviance; xlogy handles y == 0 and y == 1 exactly.
    term = (
        scipy.special.xlogy(y, y)
        - scipy.special.xlogy(y, mu)
        + scipy.special.xlogy(1.0 - y, 1.0 - y)
        - scipy.special.xlogy(1.0 - y, 1.0 - mu)
    )
    return float(2.0 * np.sum(w * term))


def fit_logistic(
    design,
    response,
    weights=None,
    offset=None,
    *,
    max_iter: int = 100,
    dev_tol: float = 1e-10,
    score_tol: float = 1e-8,
) -> GlmFit:
    """Maximize the weighted Bernoulli quasi-log-likelihood by IRLS.

    Responses may be fractional (proportions in [0, 1]); weights are
    prior (case) weights; ``offset`` is added to the linear predictor
    and not estimated. Convergence requires both a relative deviance
    change below ``dev_tol`` and a componentwise score below
    ``score_tol``. Separation (unbounded linear predictor) is reported
    via ``converged=False`` with the last finite coefficients kept.

    Raises:
        SingularMatrixError: the weighted information matrix is not
            positive definite (collinear design, degenerate weights).
        ValueError: malformed inputs.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    w = np.broadcast_to(np.asarray(
        1.0 if weights is None else weights, dtype=float), (n,)).copy()
    off = np.broadcast_to(np.asarray(
        0.0 if offset is None else offset, dtype=float), (n,)).copy()
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, expected ({n},)")
    for name, arr in (("design", X), ("response", y), ("weights", w), ("offset", off)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite entries in {name}")
    if np.any((y < 0.0) | (y > 1.0)):
        raise ValueError("response values must lie in [0, 1]")
    if np.any(w < 0.0):
        raise ValueError("weights must be non-negative")

    beta = np.zeros(p)
    eta = off.copy()
    mu = expit(eta)
    dev = _deviance(y, mu, w)
    score = X.T @ (w * (y - mu))
    max_abs_score = float(np.max(np.abs(score))) if p else 0.0
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        s = np.clip(mu * (1.0 - mu), 1e-10, None)
        wk = w * s
        info = X.T @ (X * wk[:, None])
        rhs = X.T @ (wk * ((eta - off) + (y - mu) / s))
        try:
            chol = scipy.linalg.cho_factor(info, lower=True)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            raise SingularMatrixError(iterations) from None
        beta_new = scipy.linalg.cho_solve(chol, rhs)
        if not np.all(np.isfinite(beta_new)):
            break
        beta = beta_new
        eta = X @ beta + off
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        max_abs_score = float(np.max(np.abs(score)))
        if np.max(np.abs(eta)) > _ETA_LIMIT:
            break  # separation: probabilities numerically at 0/1
        dev_new = _deviance(y, mu, w)
        if dev == 0.0:
            rel = 0.0 if dev_new == 0.0 else np.inf
        else:
            rel = abs(dev_new - dev) / dev
        if rel <= dev_tol and max_abs_score <= score_tol:
            converged = True
            break
        dev = dev_new

    return GlmFit(
        coefficients=beta,
        converged=converged,
        iterations=iterations,
        max_abs_score=max_abs_score,
    )


def t_quantile(p: float, df: int) -> float:
    """Inverse CDF of Student's t with ``df`` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return float(scipy.stats.t.ppf(p, df))


def t_cdf(x: float, df: int) -> float:
    return float(scipy.stats.t.cdf(x, df))


def norm_quantile(p: float) -> float:
    """Standard normal inverse CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    return float(scipy.stats.norm.ppf(p))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream addressed by (master_seed, path).

    ``child(*steps)`` derives a sub-stream; distinct paths give
    statistically independent streams (numpy ``SeedSequence`` spawn
    keys), so replicate/community/individual draws match bit for bit
    between serial and parallel execution.

    ``generator()`` always returns a fresh generator positioned at the
    start of the stream, which keeps every consumer a pure function of
    (master_seed, path).
    """

    master_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")

    def child(self, *steps: int) -> "RngStream":
        return RngStream(self.master_seed, self.path + tuple(int(s) for s in steps))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))


def _first_negative_minor(cov: np.ndarray) -> int:
    for k in range(1, cov.shape[0] + 1):
        if np.linalg.det(cov[:k, :k]) < 0.0:
            return k
    return cov.shape[0]


def mvn_sample(rng, mean, covariance) -> np.ndarray:
    """One multivariate-normal draw via Cholesky (eigen fallback for PSD).

    ``rng`` may be an :class:`RngStream` or a ``numpy.random.Generator``.
    A zero covariance returns the mean exactly. Non-PSD covariances
    raise, naming the offending leading principal minor.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(covariance, dtype=float)
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ValueError(f"covariance has shape {cov.shape}, expected ({d}, {d})")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ValueError("covariance matrix must be symmetric")
    z = gen.standard_normal(d)
    try:
        chol = np.linalg.cholesky(cov)
        return mean + chol @ z
    except np.linalg.LinAlgError:
        pass
    eigvals, eigvecs = np.linalg.eigh(cov)
    tol = 1e-8 * max(1.0, float(np.max(np.abs(eigvals))))
    if eigvals.min() < -tol:
        k = _first_negative_minor(cov)
        raise ValueError(
            "covariance is not positive semidefinite: "
            f"leading principal minor of order {k} is negative"
        )
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    return mean + factor @ z
