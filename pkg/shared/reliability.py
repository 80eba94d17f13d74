"""Model space, link functions, priors and IRR formulas.

Scalar functions take pydantic records and validate their inputs; the
``*_array`` variants take natural-scale theta vectors (or stacks of them)
and are what the likelihood, sampler and averaging code call in hot loops.
"""

from __future__ import annotations
import itertools
import math
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import DomainError, LinkRangeError, SchemaError
from .models import (
    CovariateProfile,
    CovariateSchema,
    ModelSpec,
    ParameterVector,
    PriorConfig,
    theta_layout,
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)
# exp() overflows just above this
_MAX_EXPONENT = 709.78


def enumerate_models(schema: CovariateSchema) -> List[ModelSpec]:
    """All 8^K main-effect specs; mean mask varies slowest, residual fastest.

    For a single covariate the order is M1..M8: M1 has no differences, M2 a
    residual difference, M3 a structural one, ..., M8 all three.
    """
    masks = list(itertools.product((False, True), repeat=schema.arity))
    return [
        ModelSpec(mean_mask=m, structural_mask=s, residual_mask=r)
        for m in masks
        for s in masks
        for r in masks
    ]


def profiles_for(schema: CovariateSchema) -> List[CovariateProfile]:
    """Every covariate profile, first covariate slowest, -0.5 before +0.5."""
    return [
        CovariateProfile(values=vals)
        for vals in itertools.product((-0.5, 0.5), repeat=schema.arity)
    ]


def effect_code(labels: Iterable[str]) -> Dict[str, float]:
    distinct = sorted({str(x) for x in labels})
    if len(distinct) != 2:
        raise SchemaError(f"binary covariate needs exactly two labels, got {distinct}")
    return {distinct[0]: -0.5, distinct[1]: 0.5}


def parameter_names(schema: CovariateSchema) -> List[str]:
    def betas(prefix: str) -> List[str]:
        return [f"{prefix}[{n}]" for n in schema.names]

    return [
        "alpha_mu", *betas("beta_mu"),
        "alpha_gamma", *betas("beta_gamma"),
        "alpha_epsilon", *betas("beta_epsilon"),
    ]


def linked_sd(alpha: float, beta: Sequence[float], profile: CovariateProfile) -> float:
    if not alpha > 0:
        raise DomainError(f"SD intercept must be positive, got {alpha}")
    if len(beta) != profile.arity:
        raise ValueError("coefficient and profile lengths differ")
    eta = float(np.dot(np.asarray(beta, dtype=float), profile.as_array())) if len(beta) else 0.0
    if abs(eta) > _MAX_EXPONENT:
        raise LinkRangeError(f"linear predictor {eta} out of exponent range")
    return alpha * math.exp(eta)


def linked_mean(alpha_mu: float, beta_mu: Sequence[float], profile: CovariateProfile) -> float:
    if len(beta_mu) != profile.arity:
        raise ValueError("coefficient and profile lengths differ")
    if not len(beta_mu):
        return float(alpha_mu)
    return float(alpha_mu + np.dot(np.asarray(beta_mu, dtype=float), profile.as_array()))


def irr(sigma_gamma: float, sigma_epsilon: float) -> float:
    if not (sigma_gamma > 0 and sigma_epsilon > 0):
        raise DomainError("IRR needs strictly positive standard deviations")
    vg = sigma_gamma * sigma_gamma
    return vg / (vg + sigma_epsilon * sigma_epsilon)


def irr_profile(params: ParameterVector, profile: CovariateProfile) -> float:
    return irr(
        linked_sd(params.alpha_gamma, params.beta_gamma, profile),
        linked_sd(params.alpha_epsilon, params.beta_epsilon, profile),
    )


def _normal_logpdf(x, loc, scale):
    z = (x - loc) / scale
    return -0.5 * z * z - math.log(scale) - _LOG_SQRT_2PI


def log_prior(params: ParameterVector, prior: PriorConfig, spec: ModelSpec) -> float:
    if not params.respects(spec):
        raise ValueError("parameter vector has nonzero masked coefficients")
    return float(log_prior_array(params.to_array(), prior, spec))


def log_prior_array(theta: np.ndarray, prior: PriorConfig, spec: ModelSpec) -> np.ndarray:
    """Log prior for one theta vector or a stack of them (rows).

    Half-normal densities are evaluated on the natural scale; nonpositive
    intercepts give -inf. Masked coefficients contribute nothing.
    """
    t = np.asarray(theta, dtype=float)
    lay = theta_layout(spec.arity)
    a_mu = t[..., lay.alpha_mu]
    a_g = t[..., lay.alpha_gamma]
    a_e = t[..., lay.alpha_epsilon]
    lp = _normal_logpdf(a_mu, prior.mu_alpha_mu, prior.sd_alpha_mu)
    with np.errstate(invalid="ignore"):
        lp = lp + np.where(a_g > 0, _LOG_2 + _normal_logpdf(a_g, 0.0, prior.sd_alpha_gamma), -np.inf)
        lp = lp + np.where(a_e > 0, _LOG_2 + _normal_logpdf(a_e, 0.0, prior.sd_alpha_epsilon), -np.inf)
    free = spec.free_mask()
    beta_cols = np.concatenate([
        np.arange(lay.beta_mu.start, lay.beta_mu.stop),
        np.arange(lay.beta_gamma.start, lay.beta_gamma.stop),
        np.arange(lay.beta_epsilon.start, lay.beta_epsilon.stop),
    ]).astype(int)
    beta_cols = beta_cols[free[beta_cols]]
    if beta_cols.size:
        lp = lp + np.sum(_normal_logpdf(t[..., beta_cols], 0.0, prior.sigma_beta), axis=-1)
    return lp


def ratee_moments(theta: np.ndarray, profiles: np.ndarray, arity: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-ratee mean, structural SD and residual SD.

    `theta` is (d,) or (S, d); `profiles` is (I, K). Results are (I,) or
    (S, I). Overflowing predictors yield inf rather than raising so that a
    sampler can reject them.
    """
    t = np.asarray(theta, dtype=float)
    lay = theta_layout(arity)
    if arity:
        eta_mu = t[..., lay.beta_mu] @ profiles.T
        eta_g = t[..., lay.beta_gamma] @ profiles.T
        eta_e = t[..., lay.beta_epsilon] @ profiles.T
    else:
        shape = t.shape[:-1] + (profiles.shape[0],)
        eta_mu = eta_g = eta_e = np.zeros(shape)
    mu = t[..., lay.alpha_mu, None] + eta_mu
    with np.errstate(over="ignore"):
        sd_g = t[..., lay.alpha_gamma, None] * np.exp(eta_g)
        sd_e = t[..., lay.alpha_epsilon, None] * np.exp(eta_e)
    return mu, sd_g, sd_e


def irr_array(theta: np.ndarray, profiles: np.ndarray, arity: int) -> np.ndarray:
    """IRR at each profile row for one theta or a stack of thetas."""
    _, sd_g, sd_e = ratee_moments(theta, profiles, arity)
    vg = sd_g * sd_g
    return vg / (vg + sd_e * sd_e)


__all__ = [
    "enumerate_models",
    "profiles_for",
    "effect_code",
    "parameter_names",
    "linked_sd",
    "linked_mean",
    "irr",
    "irr_profile",
    "log_prior",
    "log_prior_array",
    "ratee_moments",
    "irr_array",
]
