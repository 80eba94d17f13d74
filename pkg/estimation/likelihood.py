"""Marginal Gaussian likelihood with the ratee effects integrated out, and ML/REML fitting.

Within ratee i the J_i ratings are jointly normal with covariance
``ve_i * I + vg_i * 11'``. With W_i the within-ratee sum of squares and
d_i = ybar_i - mu_i the log density reduces to

    -1/2 [J_i ln 2pi + (J_i - 1) ln ve_i + ln(ve_i + J_i vg_i) + W_i / ve_i + J_i d_i^2 / (ve_i + J_i vg_i)]

so every evaluation is O(I) once the per-ratee statistics are cached on the table.
"""

from __future__ import annotations
import logging
import math
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from shared.errors import DomainError, LinkRangeError
from shared.models import ModelSpec, ParameterVector, theta_layout
from shared.reliability import ratee_moments
from shared.streams import substream
from .config import Settings, get_settings
from .data import RatingsTable
from .models import ConditionalEffects, FrequentistFit

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class Parameterization:
    """Maps the free coordinates of a spec to the natural-scale theta layout.

    Unconstrained coordinates are the free natural coordinates in layout
    order with alpha_gamma and alpha_epsilon replaced by their logs. With
    `fixed_scales` both intercepts are pinned and drop out of the free set.
    """

    def __init__(self, spec: ModelSpec, fixed_scales: Optional[Tuple[float, float]] = None):
        lay = theta_layout(spec.arity)
        self.spec = spec
        self.layout = lay
        self.fixed_scales = fixed_scales
        free = spec.free_mask().copy()
        self.base = np.zeros(lay.size)
        if fixed_scales is not None:
            free[lay.alpha_gamma] = free[lay.alpha_epsilon] = False
            self.base[lay.alpha_gamma], self.base[lay.alpha_epsilon] = fixed_scales
        self.free_index = np.flatnonzero(free)
        self.log_columns = np.flatnonzero(np.isin(self.free_index, (lay.alpha_gamma, lay.alpha_epsilon)))

    @property
    def dim(self) -> int:
        return int(self.free_index.size)

    def to_natural(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        theta = np.broadcast_to(self.base, z.shape[:-1] + self.base.shape).copy()
        vals = z.copy()
        with np.errstate(over="ignore"):
            vals[..., self.log_columns] = np.exp(vals[..., self.log_columns])
        theta[..., self.free_index] = vals
        return theta

    def to_unconstrained(self, theta: np.ndarray) -> np.ndarray:
        z = np.asarray(theta, dtype=float)[..., self.free_index].copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            z[..., self.log_columns] = np.log(z[..., self.log_columns])
        return z

    def log_jacobian(self, z: np.ndarray) -> np.ndarray:
        return np.sum(np.asarray(z)[..., self.log_columns], axis=-1)


def loglik_batch(data: RatingsTable, thetas: np.ndarray) -> np.ndarray:
    """Marginal log-likelihood for each natural-scale row of `thetas`.

    Rows with a nonpositive or overflowing variance give -inf.
    """
    t = np.atleast_2d(np.asarray(thetas, dtype=float))
    mu, sd_g, sd_e = ratee_moments(t, data.profiles, data.covariates.arity)
    vg = sd_g * sd_g
    ve = sd_e * sd_e
    J = data.counts
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        total = ve + J * vg
        d = data.means - mu
        per_ratee = -0.5 * (
            J * _LOG_2PI
            + (J - 1.0) * np.log(ve)
            + np.log(total)
            + data.within_ss / ve
            + J * d * d / total
        )
        ll = per_ratee.sum(axis=-1)
    ok = np.all((sd_g > 0) & (sd_e > 0) & np.isfinite(vg) & np.isfinite(ve), axis=-1) & np.isfinite(ll)
    return np.where(ok, ll, -np.inf)


def _check_params(data: RatingsTable, spec: ModelSpec, params: ParameterVector) -> np.ndarray:
    if spec.arity != data.covariates.arity:
        raise ValueError("spec arity does not match the table's covariates")
    if not params.respects(spec):
        raise ValueError("parameter vector has nonzero masked coefficients")
    theta = params.to_array()
    _, sd_g, sd_e = ratee_moments(theta, data.profiles, spec.arity)
    if not (np.all(np.isfinite(sd_g)) and np.all(np.isfinite(sd_e))):
        raise LinkRangeError("variance regression overflows for some ratee")
    if not (np.all(sd_g > 0) and np.all(sd_e > 0)):
        raise DomainError("standard deviations must be strictly positive")
    return theta


def marginal_loglik(data: RatingsTable, spec: ModelSpec, params: ParameterVector) -> float:
    theta = _check_params(data, spec, params)
    return float(loglik_batch(data, theta)[0])


def conditional_moments(data: RatingsTable, thetas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and SD of each ratee's effect given the ratings, per theta row."""
    mu, sd_g, sd_e = ratee_moments(np.asarray(thetas, dtype=float), data.profiles, data.covariates.arity)
    J = data.counts
    precision = 1.0 / (sd_g * sd_g) + J / (sd_e * sd_e)
    mean = J * (data.means - mu) / (sd_e * sd_e) / precision
    return mean, 1.0 / np.sqrt(precision)


def draw_conditional_effects(
    data: RatingsTable,
    spec: ModelSpec,
    params: ParameterVector,
    rng: np.random.Generator,
) -> ConditionalEffects:
    theta = _check_params(data, spec, params)
    mean, sd = conditional_moments(data, theta)
    return ConditionalEffects(gamma=mean + sd * rng.standard_normal(data.n_ratees))


def pointwise_batch(data: RatingsTable, thetas: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    """(S, n_ratings) conditional log densities for S parameter rows and effect draws."""
    t = np.atleast_2d(np.asarray(thetas, dtype=float))
    g = np.atleast_2d(np.asarray(gammas, dtype=float))
    mu, _, sd_e = ratee_moments(t, data.profiles, data.covariates.arity)
    ids = data.ratee_ids
    loc = mu[:, ids] + g[:, ids]
    scale = sd_e[:, ids]
    z = (data.ratings - loc) / scale
    return -0.5 * z * z - np.log(scale) - 0.5 * _LOG_2PI


def pointwise_loglik(
    data: RatingsTable,
    spec: ModelSpec,
    params: ParameterVector,
    effects: ConditionalEffects,
) -> np.ndarray:
    theta = _check_params(data, spec, params)
    if effects.gamma.shape != (data.n_ratees,):
        raise ValueError("one effect per ratee required")
    return pointwise_batch(data, theta, effects.gamma)[0]


class AnovaComponents(NamedTuple):
    grand_mean: float
    msb: float
    msw: float
    # effective ratings per ratee (J for balanced designs)
    n0: float
    var_structural: float
    var_residual: float


def anova_components(data: RatingsTable) -> AnovaComponents:
    """One-way ANOVA method-of-moments variance components, pooled over covariates."""
    I = data.n_ratees
    N = data.n_ratings
    J = data.counts
    grand = float(data.ratings.mean())
    msb = float(np.sum(J * (data.means - grand) ** 2) / (I - 1)) if I > 1 else 0.0
    msw = float(data.within_ss.sum() / (N - I)) if N > I else float("nan")
    n0 = float((N - np.sum(J * J) / N) / (I - 1)) if I > 1 else float(N)
    if math.isnan(msw):
        # single rating per ratee: no within information, split the total evenly
        total = float(np.var(data.ratings, ddof=1)) if N > 1 else 0.0
        return AnovaComponents(grand, msb, msw, n0, total / 2.0, total / 2.0)
    vg = max((msb - msw) / n0, 0.0) if n0 > 0 else 0.0
    return AnovaComponents(grand, msb, msw, n0, vg, msw)


def moment_start(data: RatingsTable, spec: ModelSpec, sd_min: float = 0.05) -> np.ndarray:
    """Natural-scale starting theta: ANOVA intercepts, zero coefficients."""
    lay = theta_layout(spec.arity)
    anova = anova_components(data)
    theta = np.zeros(lay.size)
    theta[lay.alpha_mu] = float(np.mean(data.means))
    theta[lay.alpha_gamma] = max(math.sqrt(anova.var_structural), sd_min)
    theta[lay.alpha_epsilon] = max(math.sqrt(anova.var_residual), sd_min)
    return theta


def _nelder_mead(objective, starts: List[np.ndarray], settings: Settings):
    best = None
    converged = False
    options = {
        "xatol": settings.optimizer_tolerance,
        "fatol": settings.optimizer_tolerance * 1e-2,
        "maxiter": settings.optimizer_max_iter,
        "maxfev": 2 * settings.optimizer_max_iter,
        "adaptive": True,
    }
    for x0 in starts:
        res = minimize(objective, x0, method="Nelder-Mead", options=options)
        # restart from the optimum so the simplex is rebuilt at full size
        res2 = minimize(objective, res.x, method="Nelder-Mead", options=options)
        if res2.fun <= res.fun:
            res = res2
        converged = converged or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    return best, converged


def _starts(x0: np.ndarray, settings: Settings, tag: int) -> List[np.ndarray]:
    starts = [x0]
    for r in range(1, settings.optimizer_restarts):
        rng = substream(settings.optimizer_seed, tag, r)
        starts.append(x0 + rng.uniform(-0.1, 0.1, size=x0.size))
    return starts


def _clamp_logs(z: np.ndarray, par: Parameterization, floor: float) -> np.ndarray:
    z = np.array(z, dtype=float)
    z[par.log_columns] = np.maximum(z[par.log_columns], math.log(floor))
    return z


def _boundary(theta: np.ndarray, spec: ModelSpec, floor: float) -> bool:
    lay = theta_layout(spec.arity)
    return bool(min(theta[lay.alpha_gamma], theta[lay.alpha_epsilon]) <= floor * (1.0 + 1e-3))


def _require_ratees(data: RatingsTable, spec: ModelSpec) -> None:
    if data.n_ratees < 2:
        raise ValueError("fitting needs at least 2 ratees")
    if spec.arity != data.covariates.arity:
        raise ValueError("spec arity does not match the table's covariates")


def ml_fit(data: RatingsTable, spec: ModelSpec, settings: Optional[Settings] = None) -> FrequentistFit:
    """Maximum likelihood over every free parameter."""
    settings = settings or get_settings()
    _require_ratees(data, spec)
    par = Parameterization(spec)
    floor = settings.sigma_floor

    def objective(z):
        theta = par.to_natural(_clamp_logs(z, par, floor))
        ll = loglik_batch(data, theta)[0]
        return -ll if np.isfinite(ll) else 1e300

    x0 = par.to_unconstrained(moment_start(data, spec))
    best, converged = _nelder_mead(objective, _starts(x0, settings, 0), settings)
    theta = par.to_natural(_clamp_logs(best.x, par, floor))
    at_boundary = _boundary(theta, spec, floor)
    if not converged:
        logger.warning("ML fit for %s did not converge", spec.describe(data.covariates))
    if at_boundary:
        logger.warning("ML fit for %s is at the variance floor", spec.describe(data.covariates))
    return FrequentistFit(
        spec=spec,
        method="ml",
        estimates=ParameterVector.from_array(theta, spec.arity),
        log_likelihood=float(loglik_batch(data, theta)[0]),
        n_ratings=data.n_ratings,
        converged=converged,
        at_boundary=at_boundary,
    )


def _mean_design(data: RatingsTable, spec: ModelSpec) -> np.ndarray:
    cols = [np.ones(data.n_ratees)]
    for c, on in enumerate(spec.mean_mask):
        if on:
            cols.append(data.profiles[:, c])
    return np.column_stack(cols)


def _gls(data: RatingsTable, spec: ModelSpec, theta: np.ndarray) -> Tuple[np.ndarray, float]:
    """GLS mean parameters given the variance part of theta, plus ln det(X'V^-1 X)."""
    _, sd_g, sd_e = ratee_moments(theta, data.profiles, spec.arity)
    J = data.counts
    w = J / (sd_e * sd_e + J * sd_g * sd_g)
    X = _mean_design(data, spec)
    xtwx = X.T @ (w[:, None] * X)
    xtwy = X.T @ (w * data.means)
    sign, logdet = np.linalg.slogdet(xtwx)
    if sign <= 0:
        return np.full(X.shape[1], np.nan), float("inf")
    return np.linalg.solve(xtwx, xtwy), float(logdet)


def _with_mean(theta: np.ndarray, spec: ModelSpec, coef: np.ndarray) -> np.ndarray:
    lay = theta_layout(spec.arity)
    out = theta.copy()
    out[lay.alpha_mu] = coef[0]
    free = [lay.beta_mu.start + c for c, on in enumerate(spec.mean_mask) if on]
    out[free] = coef[1:]
    return out


def restricted_loglik(data: RatingsTable, spec: ModelSpec, theta: np.ndarray) -> Tuple[float, np.ndarray]:
    """REML criterion (without its 2pi constant) and the GLS-completed theta."""
    coef, logdet = _gls(data, spec, theta)
    if not np.all(np.isfinite(coef)):
        return float("-inf"), theta
    full = _with_mean(theta, spec, coef)
    return float(loglik_batch(data, full)[0] - 0.5 * logdet), full


def reml_fit(data: RatingsTable, spec: ModelSpec, settings: Optional[Settings] = None) -> FrequentistFit:
    """Restricted ML over the variance parameters; mean parameters by GLS at the optimum."""
    settings = settings or get_settings()
    _require_ratees(data, spec)
    lay = theta_layout(spec.arity)
    # the optimizer only sees the variance coordinates
    variance_spec = ModelSpec(
        mean_mask=(False,) * spec.arity,
        structural_mask=spec.structural_mask,
        residual_mask=spec.residual_mask,
    )
    par = Parameterization(variance_spec)
    keep = par.free_index != lay.alpha_mu
    floor = settings.sigma_floor

    def natural(v):
        z = np.zeros(par.dim)
        z[keep] = v
        return par.to_natural(_clamp_logs(z, par, floor))

    def objective(v):
        ll, _ = restricted_loglik(data, spec, natural(v))
        return -ll if np.isfinite(ll) else 1e300

    x0 = par.to_unconstrained(moment_start(data, spec))[keep]
    best, converged = _nelder_mead(objective, _starts(x0, settings, 1), settings)
    restricted, theta = restricted_loglik(data, spec, natural(best.x))
    at_boundary = _boundary(theta, spec, floor)
    if not converged:
        logger.warning("REML fit for %s did not converge", spec.describe(data.covariates))
    if at_boundary:
        logger.warning("REML fit for %s is at the variance floor", spec.describe(data.covariates))
    return FrequentistFit(
        spec=spec,
        method="reml",
        estimates=ParameterVector.from_array(theta, spec.arity),
        log_likelihood=float(loglik_batch(data, theta)[0]),
        restricted_log_likelihood=restricted,
        n_ratings=data.n_ratings,
        converged=converged,
        at_boundary=at_boundary,
    )


__all__ = [
    "Parameterization",
    "loglik_batch",
    "marginal_loglik",
    "conditional_moments",
    "draw_conditional_effects",
    "pointwise_batch",
    "pointwise_loglik",
    "AnovaComponents",
    "anova_components",
    "moment_start",
    "restricted_loglik",
    "ml_fit",
    "reml_fit",
]
