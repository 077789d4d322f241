"""Basic Fay-Herriot area-level model.

Y_i = theta_i + e_i,  theta_i = x_i' beta + u_i, with e_i ~ N(0, sigma2_i)
known and u_i ~ N(0, sigma2_u) estimated by ML, REML, a moments estimator,
or the iterative moment-matching estimator.  The total covariance
V = diag(sigma2_u + sigma2_i) is diagonal, so every likelihood term is an
O(D p^2) accumulation; no dense D x D matrix is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import ColumnMismatch, NoConvergence, SingularDesign, ZeroTotalVariance

REL_TOL = 1e-8
MAX_ITER = 200

ML = "ML"
REML = "REML"
MOMENTS = "MOMENTS"
FH_ITERATIVE = "FH_ITERATIVE"


@dataclass(frozen=True)
class FhInput:
    """Direct estimates, design matrix, and known sampling variances."""

    y: np.ndarray          # (D,)
    x: np.ndarray          # (D, p), includes intercept column
    sigma2_e: np.ndarray   # (D,) known sampling variances
    max_zero_var: int = 0  # census-complete areas allowed past this count

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "sigma2_e", np.asarray(self.sigma2_e, dtype=float))
        D, p = self.x.shape
        if self.y.shape != (D,) or self.sigma2_e.shape != (D,):
            raise ValueError("y, x, sigma2_e dimensions disagree")
        if D <= p:
            raise SingularDesign(f"D={D} must exceed p={p}")
        if p == 0 or np.linalg.matrix_rank(self.x) < p:
            raise SingularDesign("design matrix is rank deficient")
        if np.any(self.sigma2_e < 0):
            raise ValueError("sampling variances must be nonnegative")
        nzero = int(np.sum(self.sigma2_e == 0))
        if nzero > self.max_zero_var:
            raise ZeroTotalVariance(
                f"{nzero} zero sampling variances (max allowed {self.max_zero_var})"
            )

    @property
    def D(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class FhFit:
    """Fitted model: coefficients, variance component, shrinkage weights."""

    beta: np.ndarray
    sigma2_u: float
    method: str
    loglik: float | None
    gamma: np.ndarray
    converged: bool
    iterations: int
    trace: tuple[tuple[float, float], ...] = ()  # (sigma2_u, objective) visits


def gls_beta(inp: FhInput, sigma2_u: float) -> np.ndarray:
    """GLS coefficients (X'V^-1 X)^-1 X'V^-1 Y at the given variance."""
    v = sigma2_u + inp.sigma2_e
    if np.any(v <= 0):
        raise ZeroTotalVariance("some sigma2_u + sigma2_i is not positive")
    xtvx = inp.x.T @ (inp.x / v[:, None])
    try:
        return np.linalg.solve(xtvx, inp.x.T @ (inp.y / v))
    except np.linalg.LinAlgError as exc:
        raise SingularDesign("X'V^-1 X is singular") from exc


def _residual(inp: FhInput, sigma2_u: float) -> tuple[np.ndarray, np.ndarray]:
    v = sigma2_u + inp.sigma2_e
    beta = gls_beta(inp, sigma2_u)
    return inp.y - inp.x @ beta, v


def profile_loglik(inp: FhInput, sigma2_u: float, method: str = ML) -> float:
    """Profile log likelihood (constant dropped), beta profiled out by GLS."""
    r, v = _residual(inp, sigma2_u)
    ll = -0.5 * (np.sum(np.log(v)) + np.sum(r * r / v))
    if method == REML:
        xtvx = inp.x.T @ (inp.x / v[:, None])
        ll -= 0.5 * np.linalg.slogdet(xtvx)[1]
    return float(ll)


def profile_score(inp: FhInput, sigma2_u: float, method: str = ML) -> float:
    """Analytic derivative of the profile log likelihood in sigma2_u."""
    r, v = _residual(inp, sigma2_u)
    s = 0.5 * (np.sum(r * r / v**2) - np.sum(1.0 / v))
    if method == REML:
        xtvx = inp.x.T @ (inp.x / v[:, None])
        xtv2x = inp.x.T @ (inp.x / (v**2)[:, None])
        s += 0.5 * np.trace(np.linalg.solve(xtvx, xtv2x))
    return float(s)


def _finish(inp: FhInput, sigma2_u: float, method: str, loglik: float | None,
            converged: bool, iterations: int, trace=()) -> FhFit:
    beta = gls_beta(inp, sigma2_u)
    gamma = sigma2_u / (sigma2_u + inp.sigma2_e) if sigma2_u > 0 else np.zeros(inp.D)
    return FhFit(beta, float(sigma2_u), method, loglik, gamma, converged,
                 iterations, tuple(trace))


def _maximize_profile(inp: FhInput, method: str) -> FhFit:
    upper = 10.0 * float(np.var(inp.y))
    upper = max(upper, 10.0 * float(np.max(inp.sigma2_e)), 1e-8)

    visits: list[tuple[float, float]] = []

    def score(s: float) -> float:
        val = profile_score(inp, s, method)
        visits.append((float(s), val))
        return val

    if score(0.0) <= 0:
        # objective decreasing at the origin: truncated estimate
        return _finish(inp, 0.0, method, profile_loglik(inp, 0.0, method),
                       True, 0, visits)

    expansions = 0
    while score(upper) > 0 and expansions < 60:
        upper *= 2.0
        expansions += 1
    if expansions == 60:
        raise NoConvergence("score never changes sign; no interior maximum found")

    try:
        root, res = optimize.brentq(
            score, 0.0, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps,
            maxiter=MAX_ITER, full_output=True,
        )
        converged, iters = res.converged, res.iterations
    except (RuntimeError, ValueError):
        # derivative-based search failed; fall back to bounded scalar search
        res = optimize.minimize_scalar(
            lambda s: -profile_loglik(inp, s, method),
            bounds=(0.0, upper), method="bounded",
            options={"xatol": REL_TOL * upper, "maxiter": MAX_ITER},
        )
        root, converged, iters = float(res.x), bool(res.success), int(res.nfev)
    if not converged:
        raise NoConvergence(f"{method} profile search did not converge")
    return _finish(inp, root, method, profile_loglik(inp, root, method),
                   True, iters, visits)


def fit_ml(inp: FhInput) -> FhFit:
    """Maximum likelihood fit of sigma2_u (beta profiled out)."""
    return _maximize_profile(inp, ML)


def fit_reml(inp: FhInput) -> FhFit:
    """Restricted maximum likelihood fit of sigma2_u."""
    return _maximize_profile(inp, REML)


def fit_moments(inp: FhInput) -> FhFit:
    """Moments estimator: OLS residual mean square minus leverage-corrected
    sampling variance, truncated at zero."""
    xtx = inp.x.T @ inp.x
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign("X'X is singular") from exc
    beta_ols = xtx_inv @ (inp.x.T @ inp.y)
    resid = inp.y - inp.x @ beta_ols
    h = np.einsum("ij,jk,ik->i", inp.x, xtx_inv, inp.x)
    s2 = np.sum(resid**2 - inp.sigma2_e * (1.0 - h)) / (inp.D - inp.p)
    return _finish(inp, max(0.0, float(s2)), MOMENTS, None, True, 0)


def fit_fh_iterative(inp: FhInput) -> FhFit:
    """Iterative moment-matching estimator: solve for the sigma2_u at which
    the GLS-standardized residual sum of squares equals D - p."""
    target = inp.D - inp.p

    def excess(s: float) -> float:
        r, v = _residual(inp, s)
        return float(np.sum(r * r / v)) - target

    if excess(0.0) < 0:
        return _finish(inp, 0.0, FH_ITERATIVE, None, True, 0)

    upper = max(10.0 * float(np.var(inp.y)), 10.0 * float(np.max(inp.sigma2_e)), 1e-8)
    expansions = 0
    while excess(upper) > 0 and expansions < 60:
        upper *= 2.0
        expansions += 1
    if expansions == 60:
        raise NoConvergence("moment-matching equation has no root below bound")
    root, res = optimize.brentq(
        excess, 0.0, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps,
        maxiter=MAX_ITER, full_output=True,
    )
    if not res.converged:
        raise NoConvergence("moment-matching iteration did not converge")
    return _finish(inp, root, FH_ITERATIVE, None, True, res.iterations)


FITTERS = {ML: fit_ml, REML: fit_reml, MOMENTS: fit_moments, FH_ITERATIVE: fit_fh_iterative}


def fit(inp: FhInput, method: str = REML) -> FhFit:
    try:
        return FITTERS[method](inp)
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None


# --- prediction ------------------------------------------------------------

@dataclass(frozen=True)
class PredictionRow:
    """One area-level prediction with provenance flags."""

    area_id: str
    kind: str              # direct | eblup | seblup | synthetic
    value: float
    gamma: float | None = None
    mse: float | None = None
    mse_method: str | None = None
    flags: tuple[str, ...] = ()
    stratum: int | None = None


def eblup(inp: FhInput, fit_: FhFit, ids: Sequence[str] | None = None) -> list[PredictionRow]:
    """Composite predictor gamma*Y + (1-gamma)*X beta with g1+g2 MSE.

    g1_i = gamma_i sigma2_i covers the random-effect shrinkage error;
    g2_i = (1-gamma_i)^2 x_i (X'V^-1 X)^-1 x_i' covers beta estimation.
    """
    ids = list(ids) if ids is not None else [str(i) for i in range(inp.D)]
    synth = inp.x @ fit_.beta
    theta = fit_.gamma * inp.y + (1.0 - fit_.gamma) * synth
    v = fit_.sigma2_u + inp.sigma2_e
    xtvx = inp.x.T @ (inp.x / v[:, None])
    xtvx_inv = np.linalg.inv(xtvx)
    g1 = fit_.gamma * inp.sigma2_e
    g2 = (1.0 - fit_.gamma) ** 2 * np.einsum("ij,jk,ik->i", inp.x, xtvx_inv, inp.x)
    return [
        PredictionRow(ids[i], "eblup", float(theta[i]), float(fit_.gamma[i]),
                      float(g1[i] + g2[i]), "g1g2")
        for i in range(inp.D)
    ]


def synthetic_predict(x_out: np.ndarray, fit_: FhFit,
                      ids: Sequence[str] | None = None) -> list[PredictionRow]:
    """Regression-only predictions X_out beta for unsampled areas."""
    x_out = np.atleast_2d(np.asarray(x_out, dtype=float))
    if x_out.shape[1] != fit_.beta.shape[0]:
        raise ColumnMismatch(
            f"x_out has {x_out.shape[1]} columns, model has {fit_.beta.shape[0]}"
        )
    ids = list(ids) if ids is not None else [str(i) for i in range(x_out.shape[0])]
    vals = x_out @ fit_.beta
    return [
        PredictionRow(ids[i], "synthetic", float(vals[i]), 0.0)
        for i in range(x_out.shape[0])
    ]
