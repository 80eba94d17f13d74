"""Marginal likelihoods by bridge sampling, Bayes factors and inclusion Bayes factors."""

from __future__ import annotations
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from shared.errors import (
    BridgeConvergenceError,
    DegenerateEvidenceError,
    DegenerateProposalError,
    PartitionError,
)
from shared.models import Component, CovariateSchema, ModelSpec, PriorConfig
from shared.streams import substream
from .config import Settings, get_settings
from .data import RatingsTable
from .models import (
    BridgeEstimate,
    EvidenceDirection,
    EvidenceLabel,
    EvidenceStrength,
    InclusionResult,
    InclusionTarget,
    ModelEvidence,
    PosteriorDraws,
)
from .sampler import PosteriorTarget, Target

logger = logging.getLogger(__name__)


def _logmeanexp(x: np.ndarray) -> float:
    return float(logsumexp(x) - math.log(x.size))


def _split_halves(draws: PosteriorDraws, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """First and second half of every chain, each stacked in chain order."""
    per_chain = draws.by_chain(values)
    half = draws.draws_per_chain // 2
    first = per_chain[:, :half].reshape(-1, *per_chain.shape[2:])
    second = per_chain[:, half:].reshape(-1, *per_chain.shape[2:])
    return first, second


def bridge_logml(
    draws: PosteriorDraws,
    data: RatingsTable,
    spec: ModelSpec,
    prior: PriorConfig,
    *,
    settings: Optional[Settings] = None,
    proposal: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    target: Optional[Target] = None,
    rng: Optional[np.random.Generator] = None,
) -> BridgeEstimate:
    """Optimal bridge sampling estimate of the log marginal likelihood.

    The first half of every chain fits a multivariate normal proposal on the
    unconstrained scale; the second half and an equal number of proposal
    draws feed the fixed-point iteration, which runs in log space around
    the median of the posterior-side log ratios. `proposal` (mean, cov),
    `target` and `rng` override the defaults.
    """
    settings = settings or get_settings()
    target = target or PosteriorTarget(data, spec, prior, draws.fixed_scales)
    rng = rng or substream(draws.seed, draws.chains)

    fit, post = _split_halves(draws, draws.unconstrained)
    _, post_lp = _split_halves(draws, draws.log_density)
    if proposal is None:
        mean = fit.mean(axis=0)
        cov = np.atleast_2d(np.cov(fit.T))
    else:
        mean, cov = np.asarray(proposal[0], dtype=float), np.atleast_2d(proposal[1])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegenerateProposalError("proposal covariance is not positive definite") from None

    n1 = post.shape[0]
    n2 = n1
    generated = mean + rng.standard_normal((n2, mean.size)) @ chol.T

    q11 = post_lp
    q12 = multivariate_normal.logpdf(post, mean, cov).reshape(n1)
    q21 = target.log_density(generated)
    q22 = multivariate_normal.logpdf(generated, mean, cov).reshape(n2)
    l1 = q11 - q12
    l2 = q21 - q22
    if not np.all(np.isfinite(l1)):
        raise DegenerateProposalError("non-finite log ratio at posterior draws")
    # proposal draws may fall where the target vanishes; those contribute 0
    lstar = float(np.median(l1))
    l1 = l1 - lstar
    l2 = l2 - lstar

    log_s1 = math.log(n1 / (n1 + n2))
    log_s2 = math.log(n2 / (n1 + n2))
    log_r = 0.0
    for it in range(1, settings.bridge_max_iter + 1):
        num = l2 - np.logaddexp(log_s1 + l2, log_s2 + log_r)
        den = -np.logaddexp(log_s1 + l1, log_s2 + log_r)
        new = _logmeanexp(num) - _logmeanexp(den)
        if not math.isfinite(new):
            raise DegenerateProposalError(f"bridge iteration {it} is not finite")
        change = abs(math.expm1(new - log_r))
        log_r = new
        if change < settings.bridge_tolerance:
            break
    else:
        raise BridgeConvergenceError(
            f"bridge sampling did not converge in {settings.bridge_max_iter} iterations",
            log_r + lstar,
            settings.bridge_max_iter,
        )

    logml = log_r + lstar
    mcse = _bridge_mcse(l1 + lstar, l2 + lstar, logml, log_s1, log_s2)
    logger.debug("Bridge sampling converged after %d iterations: %.4f (MCSE %.4f)", it, logml, mcse)
    return BridgeEstimate(log_marglik=logml, mcse=mcse, iterations=it)


def _bridge_mcse(l1: np.ndarray, l2: np.ndarray, logml: float, log_s1: float, log_s2: float) -> float:
    """Approximate SE of the log estimate from the relative MSE of the bridge ratio."""
    with np.errstate(over="ignore", under="ignore"):
        f1 = np.exp(-np.logaddexp(log_s1, log_s2 - (l2 - logml)))
        f2 = np.exp(-np.logaddexp(log_s1 + (l1 - logml), log_s2))
    m1, m2 = f1.mean(), f2.mean()
    if m1 <= 0 or m2 <= 0:
        return float("nan")
    re2 = f1.var() / (m1 * m1) / f1.size + f2.var() / (m2 * m2) / f2.size
    return float(math.sqrt(re2))


def bayes_factor(logml_1: float, logml_0: float) -> float:
    if not (math.isfinite(logml_1) and math.isfinite(logml_0)):
        raise ValueError("Bayes factor needs finite log marginal likelihoods")
    return math.exp(logml_1 - logml_0)


def uniform_model_priors(n: int) -> List[float]:
    if n < 1:
        raise ValueError("need at least one model")
    return [1.0 / n] * n


def posterior_model_probs(evidences: Sequence[ModelEvidence]) -> List[ModelEvidence]:
    priors = np.array([e.prior_prob for e in evidences], dtype=float)
    if not len(evidences) or abs(priors.sum() - 1.0) > 1e-9:
        raise ValueError("prior model probabilities must sum to 1")
    log_w = np.array([e.log_marglik for e in evidences], dtype=float) + np.log(priors)
    if not np.any(np.isfinite(log_w)):
        raise DegenerateEvidenceError("every model has zero marginal likelihood")
    w = np.exp(log_w - np.max(log_w))
    post = w / w.sum()
    return [e.model_copy(update={"posterior_prob": float(p)}) for e, p in zip(evidences, post)]


def inclusion_bf(evidences: Sequence[ModelEvidence], target: InclusionTarget) -> InclusionResult:
    present = np.array([target.present_in(e.spec) for e in evidences], dtype=bool)
    if present.all() or not present.any():
        raise PartitionError(
            f"{target.component.value} difference on covariate {target.covariate} "
            "does not split the model set"
        )
    prior = np.array([e.prior_prob for e in evidences])
    post = np.array([e.posterior_prob for e in evidences])
    prior_odds = prior[present].sum() / prior[~present].sum()
    with np.errstate(divide="ignore"):
        post_odds = float(np.divide(post[present].sum(), post[~present].sum()))
    return InclusionResult(
        target=target,
        bf_inclusion=post_odds / prior_odds,
        prior_incl_odds=float(prior_odds),
        posterior_incl_odds=post_odds,
    )


def inclusion_table(evidences: Sequence[ModelEvidence], schema: CovariateSchema) -> List[InclusionResult]:
    """Inclusion BFs for every (component, covariate) that splits the model set."""
    out: List[InclusionResult] = []
    for component in Component:
        for c in range(schema.arity):
            target = InclusionTarget(component=component, covariate=c)
            try:
                out.append(inclusion_bf(evidences, target))
            except PartitionError:
                logger.debug("Skipping inclusion target %s/%s", component.value, schema.names[c])
    return out


_THRESHOLDS = (
    (3.0, EvidenceStrength.WEAK),
    (10.0, EvidenceStrength.MODERATE),
    (100.0, EvidenceStrength.STRONG),
)


def evidence_label(bf: float) -> EvidenceLabel:
    if not bf > 0:
        raise ValueError(f"Bayes factor must be positive, got {bf}")
    if bf == 1.0:
        return EvidenceLabel(strength=EvidenceStrength.NONE, direction=EvidenceDirection.NEITHER)
    direction = EvidenceDirection.PRESENCE if bf > 1.0 else EvidenceDirection.ABSENCE
    magnitude = bf if bf > 1.0 else 1.0 / bf
    strength = EvidenceStrength.VERY_STRONG
    for bound, label in _THRESHOLDS:
        if magnitude <= bound:
            strength = label
            break
    return EvidenceLabel(strength=strength, direction=direction)


__all__ = [
    "bridge_logml",
    "bayes_factor",
    "uniform_model_priors",
    "posterior_model_probs",
    "inclusion_bf",
    "inclusion_table",
    "evidence_label",
]
