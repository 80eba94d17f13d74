"""Selection and weighting across a fitted model space.

Turns the per-model fits of one dataset into posterior model
probabilities, one weight vector per averaging method, one selected
model per selection method and the inclusion Bayes factors. Models whose
fit is missing a needed piece get weight 0 under the affected methods.
"""

from __future__ import annotations
import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shared.errors import DegenerateEvidenceError
from shared.models import CovariateSchema, ModelSpec
from .averaging import (
    AVERAGING_METHODS,
    SELECTION_METHODS,
    ic_weights,
    pseudo_bma_weights,
    select_model,
    stacking_weights,
    stepwise,
)
from .config import Settings, get_settings
from .data import RatingsTable
from .evidence import inclusion_table, posterior_model_probs, uniform_model_priors
from .models import InclusionResult, ModelEvidence, ModelFit, WeightMethod, WeightVector

logger = logging.getLogger(__name__)


class SpaceAnalysis(BaseModel):
    model_config = ConfigDict(frozen=True)

    specs: List[ModelSpec]
    evidences: List[ModelEvidence]
    weights: Dict[str, WeightVector] = Field(default_factory=dict)
    selected: Dict[str, int] = Field(default_factory=dict)
    inclusion: List[InclusionResult] = Field(default_factory=list)

    def selected_spec(self, method: str) -> ModelSpec:
        return self.specs[self.selected[method]]


def model_evidences(fits: Sequence[ModelFit], priors: Optional[Sequence[float]] = None) -> List[ModelEvidence]:
    priors = list(priors) if priors is not None else uniform_model_priors(len(fits))
    evidences = [
        ModelEvidence(
            spec=f.spec,
            log_marglik=f.log_marglik,
            log_marglik_mcse=f.bridge.mcse if f.bridge is not None else 0.0,
            prior_prob=p,
        )
        for f, p in zip(fits, priors)
    ]
    return posterior_model_probs(evidences)


def _partial_weights(
    available: Sequence[bool],
    compute: Callable[[List[int]], WeightVector],
    method: WeightMethod,
) -> WeightVector:
    idx = [i for i, ok in enumerate(available) if ok]
    if not idx:
        raise DegenerateEvidenceError(f"no model has the inputs for {method.value} weights")
    sub = compute(idx)
    full = np.zeros(len(available))
    full[idx] = sub.as_array()
    return WeightVector(method=method, weights=tuple(float(x) for x in full),
                        converged=sub.converged, iterations=sub.iterations)


def space_weights(
    fits: Sequence[ModelFit],
    evidences: Sequence[ModelEvidence],
    methods: Sequence[str],
    settings: Optional[Settings] = None,
) -> Dict[str, WeightVector]:
    settings = settings or get_settings()
    out: Dict[str, WeightVector] = {}
    has_ml = [f.ml is not None for f in fits]
    has_crit = [f.criteria is not None for f in fits]
    for m in methods:
        if m == "bma":
            out[m] = WeightVector(method=WeightMethod.BMA, weights=tuple(e.posterior_prob for e in evidences))
        elif m == "aic_weights":
            out[m] = _partial_weights(has_ml, lambda ix: ic_weights([fits[i].ml.aic for i in ix], WeightMethod.AIC), WeightMethod.AIC)
        elif m == "bic_weights":
            out[m] = _partial_weights(has_ml, lambda ix: ic_weights([fits[i].ml.bic for i in ix], WeightMethod.BIC), WeightMethod.BIC)
        elif m == "waic_weights":
            # WAIC is on the elpd scale; -2 * elpd is the deviance scale ic_weights expects
            out[m] = _partial_weights(
                has_crit,
                lambda ix: ic_weights([-2.0 * fits[i].criteria.waic for i in ix], WeightMethod.WAIC),
                WeightMethod.WAIC,
            )
        elif m == "pseudo_bma":
            out[m] = _partial_weights(has_crit, lambda ix: pseudo_bma_weights([fits[i].criteria.loo for i in ix]), WeightMethod.PSEUDO_BMA)
        elif m == "stacking":
            def _stack(ix: List[int]) -> WeightVector:
                if len(ix) == 1:
                    return WeightVector(method=WeightMethod.STACKING, weights=(1.0,))
                lpd = np.column_stack([fits[i].criteria.loo_pointwise for i in ix])
                return stacking_weights(lpd, settings)
            out[m] = _partial_weights(has_crit, _stack, WeightMethod.STACKING)
    return out


def space_selection(
    data: RatingsTable,
    fits: Sequence[ModelFit],
    evidences: Sequence[ModelEvidence],
    methods: Sequence[str],
    stepwise_alpha: float = 0.05,
    boundary_mixture: bool = False,
    settings: Optional[Settings] = None,
) -> Dict[str, int]:
    """Index of the selected model for every requested selection method."""
    settings = settings or get_settings()
    specs = [f.spec for f in fits]
    nan = float("nan")
    out: Dict[str, int] = {}
    for m in methods:
        if m == "bf":
            out[m] = select_model(specs, [e.posterior_prob for e in evidences], higher_is_better=True)
        elif m == "aic":
            out[m] = select_model(specs, [f.ml.aic if f.ml else nan for f in fits])
        elif m == "bic":
            out[m] = select_model(specs, [f.ml.bic if f.ml else nan for f in fits])
        elif m == "waic":
            out[m] = select_model(specs, [f.criteria.waic if f.criteria else nan for f in fits], higher_is_better=True)
        elif m == "loo":
            out[m] = select_model(specs, [f.criteria.loo if f.criteria else nan for f in fits], higher_is_better=True)
        elif m in ("forward", "backward"):
            mean_effects = any(any(s.mean_mask) for s in specs)
            cache = {}
            for f in fits:
                if f.ml is not None:
                    cache[(f.spec, "ml")] = f.ml
                if f.reml is not None:
                    cache[(f.spec, "reml")] = f.reml
            chosen = stepwise(data, m, stepwise_alpha, mean_effects=mean_effects,
                              boundary_mixture=boundary_mixture, cache=cache, settings=settings)
            if chosen not in specs:
                logger.warning("Stepwise %s chose a model outside the fitted space", m)
                continue
            out[m] = specs.index(chosen)
    return out


def analyze_space(
    data: RatingsTable,
    fits: Sequence[ModelFit],
    selection: Sequence[str] = SELECTION_METHODS,
    averaging: Sequence[str] = AVERAGING_METHODS,
    priors: Optional[Sequence[float]] = None,
    stepwise_alpha: float = 0.05,
    boundary_mixture: bool = False,
    settings: Optional[Settings] = None,
) -> SpaceAnalysis:
    settings = settings or get_settings()
    evidences = model_evidences(fits, priors)
    schema: CovariateSchema = data.covariates
    return SpaceAnalysis(
        specs=[f.spec for f in fits],
        evidences=evidences,
        weights=space_weights(fits, evidences, averaging, settings),
        selected=space_selection(data, fits, evidences, selection, stepwise_alpha, boundary_mixture, settings),
        inclusion=inclusion_table(evidences, schema),
    )


__all__ = [
    "SpaceAnalysis",
    "model_evidences",
    "space_weights",
    "space_selection",
    "analyze_space",
]
