"""Adaptive random-walk Metropolis for one model, plus split-chain diagnostics."""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
import logging
import math
from typing import List, NamedTuple, Optional, Protocol, Tuple

import arviz as az
import numpy as np
from scipy.stats import halfnorm

from shared.errors import DiagnosticError, SamplerInitError
from shared.models import ModelSpec, PriorConfig
from shared.reliability import log_prior_array
from shared.streams import substream
from .config import get_settings
from .data import RatingsTable
from .likelihood import Parameterization, loglik_batch, moment_start
from .models import PosteriorDraws, SamplerConfig

logger = logging.getLogger(__name__)


class Target(Protocol):
    dim: int

    def log_density(self, z: np.ndarray) -> np.ndarray: ...

    def initial_point(self, rng: np.random.Generator) -> np.ndarray: ...


class PosteriorTarget:
    """Unnormalized log posterior of one spec on the unconstrained scale.

    With `fixed_scales=(sd_gamma, sd_epsilon)` the two SD intercepts are
    known constants and only the mean part is sampled.
    """

    def __init__(
        self,
        data: RatingsTable,
        spec: ModelSpec,
        prior: PriorConfig,
        fixed_scales: Optional[Tuple[float, float]] = None,
    ):
        self.data = data
        self.spec = spec
        self.prior = prior
        self.param = Parameterization(spec, fixed_scales)
        self.dim = self.param.dim
        # pinned intercepts are not parameters, so their prior terms drop out
        self._offset = 0.0
        if fixed_scales is not None:
            self._offset = -float(
                halfnorm.logpdf(fixed_scales[0], scale=prior.sd_alpha_gamma)
                + halfnorm.logpdf(fixed_scales[1], scale=prior.sd_alpha_epsilon)
            )

    def log_density(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        theta = self.param.to_natural(z)
        with np.errstate(invalid="ignore"):
            lp = (
                log_prior_array(theta, self.prior, self.spec)
                + loglik_batch(self.data, theta)
                + self.param.log_jacobian(z)
                + self._offset
            )
        return np.where(np.isnan(lp), -np.inf, lp)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        z = self.param.to_unconstrained(moment_start(self.data, self.spec))
        return z + rng.uniform(-0.1, 0.1, size=self.dim)


class ChainOutput(NamedTuple):
    # (chains, draws, dim)
    samples: np.ndarray
    # (chains, draws)
    log_density: np.ndarray
    acceptance: Tuple[float, ...]


def _run_chain(target: Target, cfg: SamplerConfig, chain: int) -> Tuple[np.ndarray, np.ndarray, float]:
    rng = substream(cfg.seed, chain)
    d = target.dim
    z = np.asarray(target.initial_point(rng), dtype=float)
    lp = float(target.log_density(z[None, :])[0])
    if not np.isfinite(lp):
        raise SamplerInitError(f"log posterior is not finite at the start of chain {chain}")

    log_scale = math.log(2.38 ** 2 / d)
    chol = np.eye(d) * 0.1
    warm = np.empty((cfg.warmup, d))
    out = np.empty((cfg.draws_per_chain, d))
    out_lp = np.empty(cfg.draws_per_chain)
    accepted = 0

    for it in range(cfg.warmup + cfg.draws_per_chain):
        step = math.exp(0.5 * log_scale) * (chol @ rng.standard_normal(d))
        proposal = z + step
        lp_prop = float(target.log_density(proposal[None, :])[0])
        log_ratio = lp_prop - lp if np.isfinite(lp_prop) else -np.inf
        if math.log1p(-rng.uniform()) < log_ratio:
            z, lp = proposal, lp_prop
            if it >= cfg.warmup:
                accepted += 1

        if it < cfg.warmup:
            # Robbins-Monro on the log proposal scale
            a = math.exp(min(0.0, log_ratio))
            log_scale += (a - cfg.target_acceptance) / (it + 1) ** 0.6
            warm[it] = z
            n = it + 1
            if n % cfg.adapt_interval == 0 and n // 2 > d:
                emp = np.atleast_2d(np.cov(warm[n // 2:n].T))
                try:
                    chol = np.linalg.cholesky(emp + 1e-10 * np.eye(d))
                except np.linalg.LinAlgError:
                    logger.debug("Chain %d kept its proposal at iteration %d (singular covariance)", chain, n)
        else:
            out[it - cfg.warmup] = z
            out_lp[it - cfg.warmup] = lp

    return out, out_lp, accepted / cfg.draws_per_chain


def run_chains(target: Target, cfg: SamplerConfig, workers: Optional[int] = None) -> ChainOutput:
    """Run `cfg.chains` independent chains; chain c draws from substream (seed, c)."""
    workers = workers or get_settings().chain_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _run_chain(target, cfg, c), range(cfg.chains)))
    else:
        results = [_run_chain(target, cfg, c) for c in range(cfg.chains)]
    return ChainOutput(
        samples=np.stack([r[0] for r in results]),
        log_density=np.stack([r[1] for r in results]),
        acceptance=tuple(float(r[2]) for r in results),
    )


class ParameterDiagnostics(NamedTuple):
    rhat: float
    ess: float
    degenerate: bool


def chain_diagnostics(samples: np.ndarray) -> List[ParameterDiagnostics]:
    """Split-R-hat and bulk ESS per column of a (chain, draw, p) array."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    chains, n, p = x.shape
    if chains < 2:
        raise DiagnosticError("diagnostics need at least 2 chains")
    if n // 2 < 4:
        raise DiagnosticError("diagnostics need at least 4 draws per half-chain")
    out: List[ParameterDiagnostics] = []
    for j in range(p):
        col = x[:, :, j]
        if np.any(np.ptp(col, axis=1) == 0):
            out.append(ParameterDiagnostics(float("nan"), 1.0, True))
            continue
        out.append(ParameterDiagnostics(
            float(az.rhat(col, method="rank")),
            float(az.ess(col, method="bulk")),
            False,
        ))
    return out


def diagnostics(draws: PosteriorDraws) -> List[ParameterDiagnostics]:
    """Diagnostics for each free natural-scale coordinate of a posterior sample."""
    par = Parameterization(draws.spec, draws.fixed_scales)
    free = draws.draws[:, par.free_index]
    return chain_diagnostics(draws.by_chain(free))


def sample_posterior(
    data: RatingsTable,
    spec: ModelSpec,
    prior: PriorConfig,
    cfg: SamplerConfig,
    fixed_scales: Optional[Tuple[float, float]] = None,
) -> PosteriorDraws:
    target = PosteriorTarget(data, spec, prior, fixed_scales)
    run = run_chains(target, cfg)
    unconstrained = run.samples.reshape(-1, target.dim)
    draws = PosteriorDraws(
        spec=spec,
        draws=target.param.to_natural(unconstrained),
        unconstrained=unconstrained,
        log_density=run.log_density.reshape(-1),
        chains=cfg.chains,
        draws_per_chain=cfg.draws_per_chain,
        acceptance=run.acceptance,
        fixed_scales=fixed_scales,
        seed=cfg.seed,
    )
    diag = diagnostics(draws)
    rhat = tuple(d.rhat for d in diag)
    degenerate = tuple(d.degenerate for d in diag)
    converged = not any(degenerate) and all(r <= cfg.max_rhat for r in rhat)
    label = spec.describe(data.covariates)
    logger.info("Sampled %s: acceptance %s", label, ", ".join(f"{a:.2f}" for a in run.acceptance))
    if not converged:
        worst = max((r for r in rhat if not math.isnan(r)), default=float("nan"))
        logger.warning("Chains for %s did not converge (max R-hat %.3f)", label, worst)
    return draws.model_copy(update={
        "rhat": rhat,
        "ess": tuple(d.ess for d in diag),
        "degenerate": degenerate,
        "converged": converged,
    })


__all__ = [
    "PosteriorTarget",
    "ChainOutput",
    "run_chains",
    "ParameterDiagnostics",
    "chain_diagnostics",
    "diagnostics",
    "sample_posterior",
]
