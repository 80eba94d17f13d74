from __future__ import annotations
import asyncio
from concurrent.futures import Executor
import functools
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from estimation.analysis import SpaceAnalysis, analyze_space
from estimation.averaging import frequentist_average
from estimation.config import Settings, get_settings
from estimation.data import SCENARIO_SCHEMA, generating_spec, get_scenario, simulate_dataset
from estimation.models import ModelFit
from estimation.orchestrator import fit_model, make_executor
from shared.models import ModelSpec
from shared.reliability import enumerate_models, ratee_moments
from shared.streams import derive_seed
from .metrics import compute_metrics
from .models import Condition, GroupEstimates, ReplicationRecord, StudyPlan, StudyResult, condition_label

logger = logging.getLogger(__name__)

# Concurrency notes:
# - One replication (simulate + every model + every method) is one unit of
#   work on the executor; its fits run sequentially inside the unit.
# - `_progress` is only touched while holding the runner's lock.
# - Seeds come from (plan seed, condition index, replication), never from
#   scheduling order, and records are gathered back in plan order.

_GROUP_PROFILES = np.array([[-0.5], [0.5]])

# how each method turns the fitted space into group estimates
_POSTERIOR_SELECTION = ("bf", "waic", "loo")
_REML_SELECTION = ("aic", "bic", "forward", "backward")
_POSTERIOR_AVERAGING = ("bma", "pseudo_bma", "stacking")
_REML_AVERAGING = ("aic_weights", "bic_weights", "waic_weights")
_NEEDS_FREQUENTIST = {"aic", "bic", "forward", "backward", "aic_weights", "bic_weights", "waic_weights", "full"}
_NEEDS_CRITERIA = {"waic", "loo", "waic_weights", "pseudo_bma", "stacking"}


def _group_values(theta: np.ndarray) -> np.ndarray:
    """(mu1, mu2, sg1, sg2, se1, se2, irr1, irr2) averaged over the rows of `theta`."""
    t = np.atleast_2d(theta)
    mu, sg, se = ratee_moments(t, _GROUP_PROFILES, 1)
    vg = sg * sg
    rel = vg / (vg + se * se)
    return np.concatenate([mu.mean(axis=0), sg.mean(axis=0), se.mean(axis=0), rel.mean(axis=0)])


def _as_estimates(values: np.ndarray) -> GroupEstimates:
    names = ("mu1", "mu2", "sg1", "sg2", "se1", "se2", "irr1", "irr2")
    return GroupEstimates(**{n: float(v) for n, v in zip(names, values)})


def _posterior_values(fit: ModelFit) -> Optional[np.ndarray]:
    return _group_values(fit.draws.draws) if fit.draws is not None else None


def _reml_values(fit: ModelFit) -> Optional[np.ndarray]:
    return _group_values(fit.reml.estimates.to_array()) if fit.reml is not None else None


def _weighted(fits: Sequence[ModelFit], weights: np.ndarray, values) -> Optional[np.ndarray]:
    keep = [i for i, w in enumerate(weights) if w > 0]
    rows = [values(fits[i]) for i in keep]
    if not keep or any(v is None for v in rows):
        return None
    per_model = np.array(rows)
    w = weights[keep] / weights[keep].sum()
    return np.array([frequentist_average(per_model[:, j], w) for j in range(per_model.shape[1])])


def group_estimates(fits: Sequence[ModelFit], analysis: SpaceAnalysis, methods: Sequence[str]) -> Dict[str, GroupEstimates]:
    """Group-level point estimates of every method that could be computed."""
    out: Dict[str, GroupEstimates] = {}
    specs = [f.spec for f in fits]
    for m in methods:
        values = None
        if m in _POSTERIOR_SELECTION or m in _REML_SELECTION:
            if m not in analysis.selected:
                continue
            fit = fits[analysis.selected[m]]
            values = _posterior_values(fit) if m in _POSTERIOR_SELECTION else _reml_values(fit)
        elif m in _POSTERIOR_AVERAGING or m in _REML_AVERAGING:
            if m not in analysis.weights:
                continue
            w = analysis.weights[m].as_array()
            values = _weighted(fits, w, _posterior_values if m in _POSTERIOR_AVERAGING else _reml_values)
        elif m == "full":
            full = ModelSpec.full(SCENARIO_SCHEMA.arity)
            if full in specs:
                values = _reml_values(fits[specs.index(full)])
        if values is None:
            logger.warning("No estimates for method %s", m)
            continue
        out[m] = _as_estimates(values)
    return out


def run_replication(
    plan: StudyPlan,
    condition_index: int,
    condition: Condition,
    replication: int,
    settings: Optional[Settings] = None,
) -> ReplicationRecord:
    """Simulate one dataset and run every method of the plan on it.

    Never raises: a failure is logged with its traceback and returned on
    the record.
    """
    settings = settings or get_settings()
    config = get_scenario(condition.scenario)
    truth = generating_spec(config)
    try:
        data_seed = derive_seed(plan.seed, condition_index, replication, 0)
        fit_seed = derive_seed(plan.seed, condition_index, replication, 1)
        data = simulate_dataset(config.with_design(condition.ratees_per_group, condition.ratings_per_ratee, data_seed))

        methods = plan.methods
        frequentist = bool(_NEEDS_FREQUENTIST.intersection(methods))
        criteria = bool(_NEEDS_CRITERIA.intersection(methods))
        fits: List[ModelFit] = []
        for i, spec in enumerate(enumerate_models(SCENARIO_SCHEMA)):
            cfg = plan.sampler.model_copy(update={"seed": derive_seed(fit_seed, i)})
            try:
                fits.append(fit_model(data, spec, plan.prior, cfg, settings, frequentist, criteria))
            except Exception as e:
                logger.warning("Model %d failed in %s rep %d: %s", i + 1, condition_label(condition.key), replication, e)
                fits.append(ModelFit(spec=spec, errors=[f"{type(e).__name__}: {e}"]))

        analysis = analyze_space(
            data,
            fits,
            selection=plan.selection_methods,
            averaging=[m for m in plan.averaging_methods if m != "full"],
            stepwise_alpha=plan.stepwise_alpha,
            boundary_mixture=plan.boundary_mixture,
            settings=settings,
        )
        selected = {m: analysis.selected_spec(m) for m in plan.selection_methods if m in analysis.selected}
        inclusion = {r.target.component.value: r.bf_inclusion for r in analysis.inclusion if r.target.covariate == 0}
        return ReplicationRecord(
            condition=condition,
            replication=replication,
            truth=truth,
            selected=selected,
            estimates=group_estimates(fits, analysis, methods),
            inclusion_bf=inclusion,
        )
    except Exception as e:
        logger.exception("Replication %d of %s failed", replication, condition_label(condition.key))
        return ReplicationRecord(
            condition=condition,
            replication=replication,
            truth=truth,
            failure=f"{type(e).__name__}: {e}",
        )


class StudyRunner:
    """Schedules the replications of a plan on an executor."""

    def __init__(self, plan: StudyPlan, settings: Optional[Settings] = None, executor: Optional[Executor] = None):
        self.plan = plan
        self.settings = settings or get_settings()
        self._executor = executor
        self._lock = asyncio.Lock()
        self._progress = 0
        self._total = len(plan.conditions()) * plan.replications

    async def _one(self, index: int, condition: Condition, rep: int) -> ReplicationRecord:
        loop = asyncio.get_running_loop()
        record = await loop.run_in_executor(
            self._executor,
            functools.partial(run_replication, self.plan, index, condition, rep, self.settings),
        )
        async with self._lock:
            self._progress += 1
            done = self._progress
        logger.info("Replication %s/%s finished (%s)", done, self._total, condition_label(condition.key))
        return record

    async def run(self) -> List[ReplicationRecord]:
        units = [
            (i, c, rep)
            for i, c in enumerate(self.plan.conditions())
            for rep in range(self.plan.replications)
        ]
        results = await asyncio.gather(*(self._one(*u) for u in units), return_exceptions=True)
        records: List[ReplicationRecord] = []
        for (i, c, rep), res in zip(units, results):
            if isinstance(res, Exception):
                logger.error("Replication %d of %s crashed", rep, condition_label(c.key), exc_info=res)
                records.append(ReplicationRecord(
                    condition=c, replication=rep, truth=generating_spec(get_scenario(c.scenario)),
                    failure=f"{type(res).__name__}: {res}",
                ))
            else:
                records.append(res)
        return records


def run_study(plan: StudyPlan, settings: Optional[Settings] = None) -> StudyResult:
    """Run every condition and replication of `plan` and score the results."""
    settings = settings or get_settings()
    executor = make_executor(settings)
    logger.info(
        "Starting study: %d conditions x %d replications, methods %s",
        len(plan.conditions()), plan.replications, ", ".join(plan.methods),
    )

    async def _run() -> List[ReplicationRecord]:
        return await StudyRunner(plan, settings, executor).run()

    try:
        records = asyncio.run(_run())
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    return StudyResult(plan=plan, records=records, metrics=compute_metrics(records, plan))


def default_plan(**overrides) -> StudyPlan:
    """Scaled-down rerun: scenarios 1 and 4.2, 50 and 200 ratees per group, 3 ratings."""
    fields = dict(scenarios=["1", "4.2"], ratees_per_group=[50, 200], ratings_per_ratee=[3], replications=200)
    fields.update(overrides)
    return StudyPlan(**fields)


def full_plan(**overrides) -> StudyPlan:
    logger.warning("The full plan fits 8 models for each of 80 conditions x replications; expect days of runtime")
    fields = dict(
        scenarios=["1", "2", "3", "4.1", "4.2", "5", "6", "7", "8.1", "8.2"],
        ratees_per_group=[25, 50, 100, 200],
        ratings_per_ratee=[3, 5],
        replications=1000,
    )
    fields.update(overrides)
    return StudyPlan(**fields)


__all__ = [
    "group_estimates",
    "run_replication",
    "StudyRunner",
    "run_study",
    "default_plan",
    "full_plan",
]
