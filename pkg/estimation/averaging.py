"""Model selection and averaging, IRR summaries and marginal means.

Selection criteria: Bayes factors (via posterior model probabilities),
AIC, BIC, WAIC, LOO and forward/backward stepwise likelihood-ratio tests.
Averaging: BMA, AIC/BIC weights, pseudo-BMA and stacking.
"""

from __future__ import annotations
import logging
import math
from typing import List, Literal, MutableMapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from shared.errors import DegenerateEvidenceError
from shared.models import Component, CovariateProfile, CovariateSchema, ModelSpec, theta_layout
from shared.reliability import irr_array, profiles_for, ratee_moments
from shared.streams import inverse_cdf_normal, substream
from .config import Settings, get_settings
from .data import RatingsTable
from .likelihood import conditional_moments, ml_fit, pointwise_batch, reml_fit
from .models import (
    DeltaIrr,
    EffectSummary,
    FrequentistFit,
    Interval,
    IrrSummaries,
    LooResult,
    MarginalMeanRow,
    MixedDraws,
    PosteriorDraws,
    PredictiveCriteria,
    ProfileIrr,
    WeightMethod,
    WeightVector,
)

logger = logging.getLogger(__name__)

SELECTION_METHODS = ("bf", "aic", "bic", "waic", "loo", "forward", "backward")
AVERAGING_METHODS = ("bma", "aic_weights", "bic_weights", "waic_weights", "pseudo_bma", "stacking", "full")


# ---------------------------------------------------------------- weights


def _normalized(log_w: np.ndarray) -> Tuple[float, ...]:
    w = np.exp(log_w - np.max(log_w))
    w = w / w.sum()
    return tuple(float(x) for x in w)


def ic_weights(values: Sequence[float], method: WeightMethod = WeightMethod.AIC) -> WeightVector:
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("information criteria must be finite")
    return WeightVector(method=method, weights=_normalized(-0.5 * (v - v.min())))


def pseudo_bma_weights(elpds: Sequence[float]) -> WeightVector:
    e = np.asarray(elpds, dtype=float)
    if not np.all(np.isfinite(e)):
        raise ValueError("elpd values must be finite")
    return WeightVector(method=WeightMethod.PSEUDO_BMA, weights=_normalized(e))


def _stacking_objective(dens: np.ndarray, w: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(dens @ w)))


def stacking_weights(lpd: np.ndarray, settings: Optional[Settings] = None) -> WeightVector:
    """Simplex weights maximizing the summed log score of the mixture.

    `lpd` is (n_points, n_models) of per-point LOO log predictive densities.
    Exponentiated-gradient ascent from uniform weights; stops when the
    Frank-Wolfe gap (an upper bound on the distance to the optimum) drops
    below the tolerance.
    """
    settings = settings or get_settings()
    lpd = np.asarray(lpd, dtype=float)
    if lpd.ndim != 2 or lpd.shape[1] < 2:
        raise ValueError("stacking needs a (points, models) matrix with at least 2 models")
    n, m = lpd.shape
    # rows rescaled by their max; the objective shifts by a constant
    dens = np.exp(lpd - lpd.max(axis=1, keepdims=True))
    log_w = np.full(m, -math.log(m))
    w = np.exp(log_w)
    f = _stacking_objective(dens, w)
    eta = 1.0
    converged = False
    it = 0
    for it in range(1, settings.stacking_max_iter + 1):
        mix = dens @ w
        grad = dens.T @ (1.0 / mix)
        gap = float(grad.max() - n)
        if gap < settings.stacking_tolerance:
            converged = True
            break
        while True:
            cand = log_w + eta * grad / n
            cand = cand - logsumexp(cand)
            w_new = np.exp(cand)
            f_new = _stacking_objective(dens, w_new)
            if f_new >= f or eta < 1e-12:
                break
            eta *= 0.5
        log_w, w, f = cand, w_new, f_new
    if not converged:
        logger.warning("Stacking stopped at the iteration cap (%d)", settings.stacking_max_iter)
    w = w / w.sum()
    return WeightVector(
        method=WeightMethod.STACKING,
        weights=tuple(float(x) for x in w),
        converged=converged,
        iterations=it,
    )


# ---------------------------------------------------------------- criteria


def waic(pointwise: np.ndarray) -> float:
    """elpd-scale WAIC: sum over points of log mean density minus variance of the log density."""
    ll = np.asarray(pointwise, dtype=float)
    s = ll.shape[0]
    if s < 2:
        raise ValueError("WAIC needs at least 2 draws")
    lppd = logsumexp(ll, axis=0) - math.log(s)
    penalty = np.var(ll, axis=0, ddof=1)
    return float(np.sum(lppd - penalty))


def loo(pointwise: np.ndarray) -> LooResult:
    """Truncated importance-sampling leave-one-out elpd.

    Raw weights 1/p(y_i | draw) are capped at S^(3/4) times their mean.
    Points whose capped weights still have an effective sample size below
    2 are flagged and use the WAIC-style estimate instead.
    """
    ll = np.asarray(pointwise, dtype=float)
    s, n = ll.shape
    if s < 100:
        raise ValueError("LOO needs at least 100 draws")
    log_w = -ll
    log_w = log_w - log_w.max(axis=0)
    w = np.exp(log_w)
    cap = s ** 0.75 * w.mean(axis=0)
    w = np.minimum(w, cap)
    with np.errstate(divide="ignore"):
        elpd_i = logsumexp(ll, axis=0, b=w) - np.log(w.sum(axis=0))
    ess = w.sum(axis=0) ** 2 / np.sum(w * w, axis=0)
    flagged = ess < 2.0
    if np.any(flagged):
        fallback = logsumexp(ll, axis=0) - math.log(s) - np.var(ll, axis=0, ddof=1)
        elpd_i = np.where(flagged, fallback, elpd_i)
        logger.warning("LOO fell back to WAIC terms for %d of %d points", int(flagged.sum()), n)
    return LooResult(
        elpd=float(elpd_i.sum()),
        pointwise=elpd_i,
        flagged=flagged,
        se=float(math.sqrt(n * np.var(elpd_i))),
    )


def _thin(n: int, max_draws: int) -> np.ndarray:
    if n <= max_draws:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, max_draws).round().astype(int))


def predictive_criteria(
    data: RatingsTable,
    draws: PosteriorDraws,
    rng: Optional[np.random.Generator] = None,
    max_draws: Optional[int] = None,
) -> PredictiveCriteria:
    """WAIC and LOO from per-rating log densities given drawn ratee effects."""
    max_draws = max_draws or get_settings().criteria_max_draws
    rng = rng or substream(draws.seed, draws.chains + 1)
    theta = draws.draws[_thin(draws.n_draws, max_draws)]
    mean, sd = conditional_moments(data, theta)
    gamma = mean + sd * rng.standard_normal(mean.shape)
    pointwise = pointwise_batch(data, theta, gamma)
    result = loo(pointwise)
    return PredictiveCriteria(
        spec=draws.spec,
        waic=waic(pointwise),
        loo=result.elpd,
        loo_se=result.se,
        loo_flagged=result.n_flagged,
        loo_pointwise=result.pointwise,
        pointwise=pointwise,
    )


def select_model(
    specs: Sequence[ModelSpec],
    values: Sequence[float],
    higher_is_better: bool = False,
) -> int:
    """Index of the best model; ties go to fewer free parameters, then list order."""
    if not specs or len(specs) != len(values):
        raise ValueError("need one value per model")
    v = np.asarray(values, dtype=float)
    score = v if higher_is_better else -v
    score = np.where(np.isnan(score), -np.inf, score)
    best = np.max(score)
    tied = [i for i in range(len(specs)) if score[i] == best]
    return min(tied, key=lambda i: (specs[i].n_parameters, i))


# ---------------------------------------------------------------- averaging


def bma_mix(
    fits: Sequence[PosteriorDraws],
    weights: WeightVector,
    total: int,
    rng: np.random.Generator,
) -> MixedDraws:
    """Model-averaged draws: model by weight, then a uniformly chosen draw of that model."""
    w = weights.as_array()
    if len(fits) != w.size:
        raise ValueError("one weight per model required")
    width = fits[0].draws.shape[1]
    model_index = rng.choice(w.size, size=total, p=w / w.sum())
    out = np.zeros((total, width))
    for m in np.unique(model_index):
        rows = np.flatnonzero(model_index == m)
        pick = rng.integers(0, fits[m].n_draws, size=rows.size)
        out[rows] = fits[m].draws[pick]
    return MixedDraws(
        specs=tuple(f.spec for f in fits),
        draws=out,
        model_index=model_index,
    )


def frequentist_average(estimates: Sequence[float], weights: Union[WeightVector, Sequence[float]]) -> float:
    w = weights.as_array() if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    e = np.asarray(estimates, dtype=float)
    if e.shape != w.shape:
        raise ValueError("estimates and weights are not aligned")
    return float(np.dot(w, e))


def frequentist_irr_average(
    fits: Sequence[Optional[FrequentistFit]],
    weights: WeightVector,
    schema: CovariateSchema,
    *,
    labels: Sequence[Tuple[str, str]] = (),
    name: str = "avg",
) -> IrrSummaries:
    """Weighted IRR per profile and ΔIRR per covariate from per-model plug-in estimates.

    Each model's IRR and ΔIRR come from its own estimates before averaging.
    Models without a fit drop out and the remaining weights are renormalized.
    The intervals are degenerate: only point estimates are averaged.
    """
    w = weights.as_array()
    keep = [i for i, f in enumerate(fits) if f is not None and w[i] > 0]
    if not keep:
        raise DegenerateEvidenceError(f"no fitted model carries {weights.method.value} weight")
    sub = w[keep] / w[keep].sum()
    theta = np.array([fits[i].estimates.to_array() for i in keep])
    profiles = profiles_for(schema)
    cells = np.array([p.values for p in profiles], dtype=float).reshape(-1, schema.arity)
    irrs = irr_array(theta, cells, schema.arity)
    delta = _delta_irr(theta, schema)
    rows = [
        ProfileIrr(profile=p, label=_profile_label(p, schema, labels),
                   irr=Interval.degenerate(frequentist_average(irrs[:, i], sub)))
        for i, p in enumerate(profiles)
    ]
    deltas = [DeltaIrr(covariate=schema.names[c], delta=Interval.degenerate(frequentist_average(delta[:, c], sub)))
              for c in range(schema.arity)]
    return IrrSummaries(source=name, profiles=rows, deltas=deltas)


# ---------------------------------------------------------------- stepwise


FitCache = MutableMapping[Tuple[ModelSpec, str], FrequentistFit]


def _cached_fit(
    data: RatingsTable,
    spec: ModelSpec,
    method: str,
    cache: FitCache,
    settings: Settings,
) -> FrequentistFit:
    key = (spec, method)
    if key not in cache:
        fitter = reml_fit if method == "reml" else ml_fit
        cache[key] = fitter(data, spec, settings)
    return cache[key]


def lrt_pvalue(ll_small: float, ll_big: float, boundary_mixture: bool = False) -> float:
    """chi^2(1) likelihood-ratio p-value; the boundary mixture halves it."""
    stat = max(2.0 * (ll_big - ll_small), 0.0)
    p = float(chi2.sf(stat, 1))
    if boundary_mixture:
        return 1.0 if stat == 0.0 else 0.5 * p
    return p


def _test(
    data: RatingsTable,
    small: ModelSpec,
    big: ModelSpec,
    method: str,
    cache: FitCache,
    settings: Settings,
    boundary_mixture: bool,
) -> Optional[float]:
    f_small = _cached_fit(data, small, method, cache, settings)
    f_big = _cached_fit(data, big, method, cache, settings)
    if not (f_small.converged and f_big.converged):
        logger.warning("Skipping stepwise candidate %s: fit did not converge", big.describe(data.covariates))
        return None
    # REML fits carry the ML likelihood at their estimates, which stays comparable across mean designs
    return lrt_pvalue(f_small.log_likelihood, f_big.log_likelihood, boundary_mixture and method == "ml")


def _forward_stage(data, spec, components, method, alpha, cache, settings, boundary_mixture) -> ModelSpec:
    while True:
        best: Optional[Tuple[float, ModelSpec]] = None
        for comp in components:
            for c, on in enumerate(spec.mask(comp)):
                if on:
                    continue
                cand = spec.with_effect(comp, c, True)
                p = _test(data, spec, cand, method, cache, settings, boundary_mixture)
                if p is not None and p <= alpha and (best is None or p < best[0]):
                    best = (p, cand)
        if best is None:
            return spec
        spec = best[1]


def _backward_stage(data, spec, components, method, alpha, cache, settings, boundary_mixture) -> ModelSpec:
    while True:
        worst: Optional[Tuple[float, ModelSpec]] = None
        for comp in components:
            for c, on in enumerate(spec.mask(comp)):
                if not on:
                    continue
                cand = spec.with_effect(comp, c, False)
                p = _test(data, cand, spec, method, cache, settings, boundary_mixture)
                if p is not None and p > alpha and (worst is None or p > worst[0]):
                    worst = (p, cand)
        if worst is None:
            return spec
        spec = worst[1]


def stepwise(
    data: RatingsTable,
    direction: Literal["forward", "backward"],
    alpha: float = 0.05,
    *,
    mean_effects: bool = True,
    boundary_mixture: bool = False,
    cache: Optional[FitCache] = None,
    settings: Optional[Settings] = None,
) -> ModelSpec:
    """Two-stage stepwise selection with chi^2(1) likelihood-ratio tests.

    forward: add mean differences (REML fits), then greedily add structural
    or residual SD differences (ML fits) while the smallest p-value is at or
    below `alpha`. backward: greedily remove SD differences (ML) while the
    largest p-value exceeds `alpha`, then remove mean differences (REML).
    With `mean_effects=False` the mean stays constant and the mean stage is
    skipped in both directions.
    """
    settings = settings or get_settings()
    cache = cache if cache is not None else {}
    k = data.covariates.arity
    variance = (Component.STRUCTURAL, Component.RESIDUAL)
    mean = (Component.MEAN,)
    if direction == "forward":
        spec = ModelSpec.null(k)
        if mean_effects:
            spec = _forward_stage(data, spec, mean, "reml", alpha, cache, settings, boundary_mixture)
        return _forward_stage(data, spec, variance, "ml", alpha, cache, settings, boundary_mixture)
    if direction == "backward":
        start = ModelSpec.full(k)
        if not mean_effects:
            start = ModelSpec(mean_mask=(False,) * k, structural_mask=(True,) * k, residual_mask=(True,) * k)
        spec = _backward_stage(data, start, variance, "ml", alpha, cache, settings, boundary_mixture)
        if not mean_effects:
            return spec
        return _backward_stage(data, spec, mean, "reml", alpha, cache, settings, boundary_mixture)
    raise ValueError(f"unknown stepwise direction {direction!r}")


# ---------------------------------------------------------------- summaries


def _profile_label(profile: CovariateProfile, schema: CovariateSchema, labels: Sequence[Tuple[str, str]]) -> str:
    parts = []
    for c, v in enumerate(profile.values):
        low, high = labels[c] if c < len(labels) else ("-0.5", "+0.5")
        parts.append(f"{schema.names[c]}={low if v < 0 else high}")
    return ", ".join(parts) if parts else "all"


def _summarize(samples: np.ndarray) -> Interval:
    lo, mid, hi = np.percentile(samples, [2.5, 50.0, 97.5])
    return Interval(point=float(mid), lower=float(min(lo, mid)), upper=float(max(hi, mid)))


def _delta_irr(theta: np.ndarray, schema: CovariateSchema) -> np.ndarray:
    """(S, K): IRR at -0.5 minus IRR at +0.5 per covariate, averaged over the other covariates."""
    k = schema.arity
    cells = np.array([p.values for p in profiles_for(schema)], dtype=float).reshape(-1, k)
    irrs = irr_array(theta, cells, k)
    out = np.empty((irrs.shape[0], k))
    for c in range(k):
        out[:, c] = irrs[:, cells[:, c] < 0].mean(axis=1) - irrs[:, cells[:, c] > 0].mean(axis=1)
    return out


def _theta_matrix(source) -> np.ndarray:
    if isinstance(source, (PosteriorDraws, MixedDraws)):
        return source.draws
    return np.atleast_2d(np.asarray(source, dtype=float))


def _bootstrap_thetas(
    data: RatingsTable,
    fit: FrequentistFit,
    resamples: int,
    rng: np.random.Generator,
    settings: Settings,
) -> np.ndarray:
    """Refit the same model to datasets simulated from the fitted parameters."""
    refit_settings = settings.model_copy(update={"optimizer_restarts": 1})
    fitter = reml_fit if fit.method == "reml" else ml_fit
    mu, sd_g, sd_e = ratee_moments(fit.estimates.to_array(), data.profiles, data.covariates.arity)
    ids = data.ratee_ids
    out = []
    for _ in range(resamples):
        gamma = sd_g * inverse_cdf_normal(rng, data.n_ratees)
        eps = sd_e[ids] * inverse_cdf_normal(rng, data.n_ratings)
        boot = data.with_ratings(mu[ids] + gamma[ids] + eps)
        out.append(fitter(boot, fit.spec, refit_settings).estimates.to_array())
    return np.array(out)


def irr_summaries(
    source: Union[PosteriorDraws, MixedDraws, FrequentistFit, np.ndarray],
    schema: CovariateSchema,
    *,
    labels: Sequence[Tuple[str, str]] = (),
    data: Optional[RatingsTable] = None,
    resamples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    settings: Optional[Settings] = None,
    name: str = "bayes",
) -> IrrSummaries:
    """IRR per covariate profile and ΔIRR per covariate.

    Draws give the posterior median and central 95% interval. A frequentist
    fit gives the plug-in estimate with a parametric-bootstrap percentile
    interval (widened to contain the plug-in value); it needs `data`.
    """
    profiles = profiles_for(schema)
    cells = np.array([p.values for p in profiles], dtype=float).reshape(-1, schema.arity)
    if isinstance(source, FrequentistFit):
        settings = settings or get_settings()
        if data is None:
            raise ValueError("bootstrap intervals need the fitted data")
        resamples = settings.bootstrap_resamples if resamples is None else resamples
        rng = rng or substream(settings.optimizer_seed, 99)
        point = source.estimates.to_array()[None, :]
        boot = _bootstrap_thetas(data, source, resamples, rng, settings) if resamples else point
        point_irr = irr_array(point, cells, schema.arity)[0]
        boot_irr = irr_array(boot, cells, schema.arity)
        point_delta = _delta_irr(point, schema)[0]
        boot_delta = _delta_irr(boot, schema)

        def interval(pt: float, samples: np.ndarray) -> Interval:
            lo, hi = np.percentile(samples, [2.5, 97.5])
            return Interval(point=float(pt), lower=float(min(lo, pt)), upper=float(max(hi, pt)))

        rows = [ProfileIrr(profile=p, label=_profile_label(p, schema, labels), irr=interval(point_irr[i], boot_irr[:, i]))
                for i, p in enumerate(profiles)]
        deltas = [DeltaIrr(covariate=schema.names[c], delta=interval(point_delta[c], boot_delta[:, c]))
                  for c in range(schema.arity)]
        return IrrSummaries(source=name, profiles=rows, deltas=deltas)

    theta = _theta_matrix(source)
    irrs = irr_array(theta, cells, schema.arity)
    delta = _delta_irr(theta, schema)
    rows = [ProfileIrr(profile=p, label=_profile_label(p, schema, labels), irr=_summarize(irrs[:, i]))
            for i, p in enumerate(profiles)]
    deltas = [DeltaIrr(covariate=schema.names[c], delta=_summarize(delta[:, c])) for c in range(schema.arity)]
    return IrrSummaries(source=name, profiles=rows, deltas=deltas)


def marginal_means(
    source: Union[PosteriorDraws, MixedDraws, np.ndarray],
    schema: CovariateSchema,
    labels: Sequence[Tuple[str, str]] = (),
) -> List[MarginalMeanRow]:
    theta = _theta_matrix(source)
    profiles = profiles_for(schema)
    cells = np.array([p.values for p in profiles], dtype=float).reshape(-1, schema.arity)
    mu, sd_g, sd_e = ratee_moments(theta, cells, schema.arity)
    irrs = irr_array(theta, cells, schema.arity)
    return [
        MarginalMeanRow(
            profile=p,
            label=_profile_label(p, schema, labels),
            mean=_summarize(mu[:, i]),
            sd_structural=_summarize(sd_g[:, i]),
            sd_residual=_summarize(sd_e[:, i]),
            irr=_summarize(irrs[:, i]),
        )
        for i, p in enumerate(profiles)
    ]


def effect_summaries(
    source: Union[PosteriorDraws, MixedDraws, np.ndarray],
    schema: CovariateSchema,
) -> List[EffectSummary]:
    """Per covariate: mean difference (-0.5 group minus +0.5 group) and SD ratios exp(beta) (+0.5 over -0.5)."""
    theta = _theta_matrix(source)
    lay = theta_layout(schema.arity)
    out: List[EffectSummary] = []
    for c, name in enumerate(schema.names):
        out.append(EffectSummary(component=Component.MEAN, covariate=name,
                                 estimate=_summarize(-theta[:, lay.beta_mu.start + c])))
        out.append(EffectSummary(component=Component.STRUCTURAL, covariate=name,
                                 estimate=_summarize(np.exp(theta[:, lay.beta_gamma.start + c]))))
        out.append(EffectSummary(component=Component.RESIDUAL, covariate=name,
                                 estimate=_summarize(np.exp(theta[:, lay.beta_epsilon.start + c]))))
    return out


__all__ = [
    "SELECTION_METHODS",
    "AVERAGING_METHODS",
    "ic_weights",
    "pseudo_bma_weights",
    "stacking_weights",
    "waic",
    "loo",
    "predictive_criteria",
    "select_model",
    "bma_mix",
    "frequentist_average",
    "frequentist_irr_average",
    "lrt_pvalue",
    "stepwise",
    "irr_summaries",
    "marginal_means",
    "effect_summaries",
]
