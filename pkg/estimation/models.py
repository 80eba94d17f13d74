"""Result records produced by the estimation modules."""

from __future__ import annotations
from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

from shared.models import Component, CovariateProfile, ModelSpec, ParameterVector


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    chains: int = Field(4, ge=2)
    warmup: int = Field(2000, ge=100)
    draws_per_chain: int = Field(2000, ge=100)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    target_acceptance: float = Field(0.30, gt=0, lt=1)
    max_rhat: float = Field(1.01, ge=1.0)
    # proposal covariance refresh period during warmup
    adapt_interval: int = Field(200, ge=10)


class PosteriorDraws(BaseModel):
    """Retained draws of one model, chains concatenated in chain order."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: ModelSpec
    # (chains * draws_per_chain, 3 + 3K), natural scale, masked columns exactly 0
    draws: np.ndarray
    # (chains * draws_per_chain, n_free): alpha_mu, free betas, log alpha_gamma, log alpha_epsilon
    unconstrained: np.ndarray
    # unnormalized log posterior on the unconstrained scale (Jacobian included)
    log_density: np.ndarray
    chains: int
    draws_per_chain: int
    acceptance: Tuple[float, ...] = ()
    fixed_scales: Optional[Tuple[float, float]] = None
    # sampler seed; chain c used substream (seed, c)
    seed: int = 0
    # per free natural-scale coordinate
    rhat: Tuple[float, ...] = ()
    ess: Tuple[float, ...] = ()
    degenerate: Tuple[bool, ...] = ()
    converged: bool = True

    @property
    def n_draws(self) -> int:
        return int(self.draws.shape[0])

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-draw array to (chain, draw, ...)."""
        return np.asarray(values).reshape(self.chains, self.draws_per_chain, *np.shape(values)[1:])

    def posterior_mean(self) -> ParameterVector:
        return ParameterVector.from_array(self.draws.mean(axis=0), self.spec.arity)


class ConditionalEffects(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gamma: np.ndarray


class FrequentistFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: ModelSpec
    method: Literal["ml", "reml"] = "ml"
    estimates: ParameterVector
    # ML log likelihood at the estimates, for REML fits too
    log_likelihood: float
    restricted_log_likelihood: Optional[float] = None
    n_ratings: int = Field(ge=1)
    converged: bool = True
    at_boundary: bool = False

    @computed_field
    @property
    def k(self) -> int:
        return self.spec.n_parameters

    @computed_field
    @property
    def aic(self) -> float:
        return 2.0 * self.k - 2.0 * self.log_likelihood

    @computed_field
    @property
    def bic(self) -> float:
        return self.k * float(np.log(self.n_ratings)) - 2.0 * self.log_likelihood


class BridgeEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    log_marglik: float
    mcse: float
    iterations: int


class ModelEvidence(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: ModelSpec
    log_marglik: float
    log_marglik_mcse: float = 0.0
    prior_prob: float = Field(gt=0, le=1)
    posterior_prob: float = Field(0.0, ge=0, le=1)


class InclusionTarget(BaseModel):
    model_config = ConfigDict(frozen=True)

    component: Component
    covariate: int = Field(ge=0)

    def present_in(self, spec: ModelSpec) -> bool:
        return bool(spec.mask(self.component)[self.covariate])


class InclusionResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    target: InclusionTarget
    bf_inclusion: float
    prior_incl_odds: float
    posterior_incl_odds: float


class EvidenceStrength(str, Enum):
    NONE = "no"
    WEAK = "weak"
    MODERATE = "moderate"
    STRONG = "strong"
    VERY_STRONG = "very strong"


class EvidenceDirection(str, Enum):
    PRESENCE = "presence"
    ABSENCE = "absence"
    NEITHER = "neither"


class EvidenceLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    strength: EvidenceStrength
    direction: EvidenceDirection

    def describe(self, effect: Optional[str] = None) -> str:
        if self.strength == EvidenceStrength.NONE:
            return "no evidence"
        text = f"{self.strength.value} evidence for {self.direction.value}"
        return f"{text} of {effect}" if effect else text


class WeightMethod(str, Enum):
    BMA = "bma"
    AIC = "aic"
    BIC = "bic"
    WAIC = "waic"
    PSEUDO_BMA = "pseudo_bma"
    STACKING = "stacking"


class WeightVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: WeightMethod
    weights: Tuple[float, ...]
    # False when an iterative optimizer stopped at its cap
    converged: bool = True
    iterations: Optional[int] = None

    @model_validator(mode="after")
    def _on_simplex(self) -> "WeightVector":
        w = np.asarray(self.weights, dtype=float)
        if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights sum to {w.sum()}, not 1")
        return self

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


class LooResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    elpd: float
    pointwise: np.ndarray
    # points whose truncated weights collapsed onto too few draws
    flagged: np.ndarray
    se: float

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flagged))


class PredictiveCriteria(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: ModelSpec
    waic: float
    loo: float
    loo_se: float
    loo_flagged: int = 0
    loo_pointwise: np.ndarray
    # (draws used, n_ratings)
    pointwise: np.ndarray


class MixedDraws(BaseModel):
    """Model-averaged draws; row s came from model `model_index[s]`."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    specs: Tuple[ModelSpec, ...]
    draws: np.ndarray
    model_index: np.ndarray

    @property
    def arity(self) -> int:
        return (self.draws.shape[1] - 3) // 3

    def label_frequencies(self) -> np.ndarray:
        return np.bincount(self.model_index, minlength=len(self.specs)) / max(len(self.model_index), 1)


class Interval(BaseModel):
    model_config = ConfigDict(frozen=True)

    point: float
    lower: float
    upper: float

    @model_validator(mode="after")
    def _ordered(self) -> "Interval":
        if not (self.lower <= self.point <= self.upper):
            raise ValueError(f"interval [{self.lower}, {self.upper}] does not contain {self.point}")
        return self

    @classmethod
    def degenerate(cls, value: float) -> "Interval":
        return cls(point=value, lower=value, upper=value)


class ProfileIrr(BaseModel):
    model_config = ConfigDict(frozen=True)

    profile: CovariateProfile
    label: str
    irr: Interval


class DeltaIrr(BaseModel):
    """IRR of the group coded -0.5 minus IRR of the group coded +0.5."""

    model_config = ConfigDict(frozen=True)

    covariate: str
    delta: Interval


class IrrSummaries(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: str
    profiles: List[ProfileIrr]
    deltas: List[DeltaIrr] = Field(default_factory=list)


class MarginalMeanRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    profile: CovariateProfile
    label: str
    mean: Interval
    sd_structural: Interval
    sd_residual: Interval
    irr: Interval


class EffectSummary(BaseModel):
    """Mean difference (-0.5 group minus +0.5 group) or SD ratio exp(beta)."""

    model_config = ConfigDict(frozen=True)

    component: Component
    covariate: str
    estimate: Interval


class AveragedResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weights: WeightVector
    mixed: MixedDraws
    irr: IrrSummaries
    inclusion: List[InclusionResult] = Field(default_factory=list)


class ModelFit(BaseModel):
    """Everything computed for one model of the space."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: ModelSpec
    draws: Optional[PosteriorDraws] = None
    bridge: Optional[BridgeEstimate] = None
    ml: Optional[FrequentistFit] = None
    reml: Optional[FrequentistFit] = None
    criteria: Optional[PredictiveCriteria] = None
    errors: List[str] = Field(default_factory=list)

    @property
    def log_marglik(self) -> float:
        return self.bridge.log_marglik if self.bridge is not None else float("-inf")

    @property
    def ok(self) -> bool:
        return not self.errors


__all__ = [
    "SamplerConfig",
    "PosteriorDraws",
    "ConditionalEffects",
    "FrequentistFit",
    "BridgeEstimate",
    "ModelEvidence",
    "InclusionTarget",
    "InclusionResult",
    "EvidenceStrength",
    "EvidenceDirection",
    "EvidenceLabel",
    "WeightMethod",
    "WeightVector",
    "LooResult",
    "PredictiveCriteria",
    "MixedDraws",
    "Interval",
    "ProfileIrr",
    "DeltaIrr",
    "IrrSummaries",
    "MarginalMeanRow",
    "EffectSummary",
    "AveragedResult",
    "ModelFit",
]
