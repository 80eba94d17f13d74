from __future__ import annotations
import asyncio
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
import functools
import logging
from typing import Dict, List, Optional, Sequence

from shared.errors import BridgeConvergenceError, DegenerateProposalError
from shared.models import ModelSpec, PriorConfig
from shared.streams import derive_seed
from .averaging import predictive_criteria
from .config import Settings, get_settings
from .data import RatingsTable
from .evidence import bridge_logml
from .likelihood import ml_fit, reml_fit
from .models import ModelFit, SamplerConfig
from .sampler import sample_posterior

logger = logging.getLogger(__name__)

# Concurrency notes:
# - `self._fits` is only read or mutated while holding `self._lock`.
# - Numerical work runs on the executor, outside the lock; a spec being
#   fitted is tracked in `self._pending` so concurrent callers share one
#   future instead of fitting twice.


def make_executor(settings: Settings) -> Optional[Executor]:
    """Executor for blocking fits; None means the event loop's default pool."""
    if settings.workers <= 1:
        return None
    if settings.worker_kind == "process":
        return ProcessPoolExecutor(max_workers=settings.workers)
    return ThreadPoolExecutor(max_workers=settings.workers)


def fit_model(
    data: RatingsTable,
    spec: ModelSpec,
    prior: PriorConfig,
    cfg: SamplerConfig,
    settings: Settings,
    frequentist: bool = True,
    criteria: bool = True,
) -> ModelFit:
    """Sample, bridge, fit ML/REML and compute predictive criteria for one model.

    Bridge failures are recorded on the fit instead of raised so that the
    model drops out of the averaging with zero posterior probability.
    """
    errors: List[str] = []
    draws = sample_posterior(data, spec, prior, cfg)
    bridge = None
    try:
        bridge = bridge_logml(draws, data, spec, prior, settings=settings)
    except (BridgeConvergenceError, DegenerateProposalError) as e:
        logger.warning("Bridge sampling failed for %s: %s", spec.describe(data.covariates), e)
        errors.append(f"bridge: {e}")
    ml = reml = None
    if frequentist:
        ml = ml_fit(data, spec, settings)
        reml = reml_fit(data, spec, settings)
    crit = None
    if criteria:
        crit = predictive_criteria(data, draws, max_draws=settings.criteria_max_draws)
    return ModelFit(spec=spec, draws=draws, bridge=bridge, ml=ml, reml=reml, criteria=crit, errors=errors)


class FitOrchestrator:
    """Fits every model of a space concurrently and caches the results.

    One instance belongs to one dataset and prior. Model `i` of the space
    samples with a seed derived from (sampler seed, i), so results do not
    depend on scheduling.
    """

    def __init__(
        self,
        data: RatingsTable,
        prior: PriorConfig,
        sampler: SamplerConfig,
        settings: Optional[Settings] = None,
        executor: Optional[Executor] = None,
        frequentist: bool = True,
        criteria: bool = True,
    ):
        self.data = data
        self.prior = prior
        self.sampler = sampler
        self.settings = settings or get_settings()
        self._executor = executor
        self._frequentist = frequentist
        self._criteria = criteria
        self._fits: Dict[ModelSpec, ModelFit] = {}
        self._pending: Dict[ModelSpec, asyncio.Future] = {}
        self._lock = asyncio.Lock()

    async def fit(self, spec: ModelSpec, index: int) -> ModelFit:
        async with self._lock:
            cached = self._fits.get(spec)
            if cached is not None:
                return cached
            fut = self._pending.get(spec)
            if fut is None:
                loop = asyncio.get_running_loop()
                cfg = self.sampler.model_copy(update={"seed": derive_seed(self.sampler.seed, index)})
                logger.info("Fitting model %d: %s", index + 1, spec.describe(self.data.covariates))
                fut = loop.run_in_executor(
                    self._executor,
                    functools.partial(
                        fit_model, self.data, spec, self.prior, cfg, self.settings,
                        self._frequentist, self._criteria,
                    ),
                )
                self._pending[spec] = fut

        try:
            result = await fut
        finally:
            async with self._lock:
                self._pending.pop(spec, None)
        async with self._lock:
            self._fits.setdefault(spec, result)
            return self._fits[spec]

    async def fit_space(self, specs: Sequence[ModelSpec]) -> List[ModelFit]:
        """Fit all specs; a failing model is returned with its error instead of raising."""
        results = await asyncio.gather(
            *(self.fit(spec, i) for i, spec in enumerate(specs)),
            return_exceptions=True,
        )
        fits: List[ModelFit] = []
        for spec, res in zip(specs, results):
            if isinstance(res, Exception):
                logger.error("Fitting %s failed", spec.describe(self.data.covariates), exc_info=res)
                fits.append(ModelFit(spec=spec, errors=[f"{type(res).__name__}: {res}"]))
            else:
                fits.append(res)
        return fits

    async def cached(self) -> Dict[ModelSpec, ModelFit]:
        async with self._lock:
            return dict(self._fits)


def fit_space(
    data: RatingsTable,
    specs: Sequence[ModelSpec],
    prior: PriorConfig,
    sampler: SamplerConfig,
    settings: Optional[Settings] = None,
    frequentist: bool = True,
    criteria: bool = True,
) -> List[ModelFit]:
    """Blocking wrapper: fit a model space on a fresh event loop."""
    settings = settings or get_settings()
    executor = make_executor(settings)

    async def _run() -> List[ModelFit]:
        orch = FitOrchestrator(data, prior, sampler, settings, executor, frequentist, criteria)
        return await orch.fit_space(specs)

    try:
        return asyncio.run(_run())
    finally:
        if executor is not None:
            executor.shutdown(wait=True)


__all__ = ["make_executor", "fit_model", "FitOrchestrator", "fit_space"]
