"""Domain types shared by the estimation, simulation and CLI packages.

All records are immutable pydantic models. Parameters travel between the
numerical modules as flat numpy vectors in the natural-scale layout
``[alpha_mu, beta_mu..., alpha_gamma, beta_gamma..., alpha_epsilon, beta_epsilon...]``;
`theta_layout` is the single place that layout is defined.
"""

from __future__ import annotations
from enum import Enum
import math
from functools import lru_cache
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import PriorError


class Component(str, Enum):
    MEAN = "mean"
    STRUCTURAL = "structural"
    RESIDUAL = "residual"


class ThetaLayout(NamedTuple):
    alpha_mu: int
    beta_mu: slice
    alpha_gamma: int
    beta_gamma: slice
    alpha_epsilon: int
    beta_epsilon: slice
    size: int


@lru_cache(maxsize=None)
def theta_layout(arity: int) -> ThetaLayout:
    k = int(arity)
    return ThetaLayout(
        alpha_mu=0,
        beta_mu=slice(1, 1 + k),
        alpha_gamma=1 + k,
        beta_gamma=slice(2 + k, 2 + 2 * k),
        alpha_epsilon=2 + 2 * k,
        beta_epsilon=slice(3 + 2 * k, 3 + 3 * k),
        size=3 + 3 * k,
    )


class CovariateSchema(BaseModel):
    model_config = ConfigDict(frozen=True)

    names: Tuple[str, ...] = ()

    @field_validator("names")
    @classmethod
    def _unique_nonempty(cls, names: Tuple[str, ...]) -> Tuple[str, ...]:
        for n in names:
            if not n or not n.strip():
                raise ValueError("covariate names must be nonempty")
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be unique")
        return names

    @property
    def arity(self) -> int:
        return len(self.names)


class CovariateProfile(BaseModel):
    """Effect-coded covariate values of one ratee (each entry -0.5 or +0.5)."""

    model_config = ConfigDict(frozen=True)

    values: Tuple[float, ...] = ()

    @field_validator("values")
    @classmethod
    def _effect_coded(cls, values: Tuple[float, ...]) -> Tuple[float, ...]:
        for v in values:
            if v not in (-0.5, 0.5):
                raise ValueError(f"profile entries must be -0.5 or +0.5, got {v}")
        return values

    @property
    def arity(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def flipped(self, index: Optional[int] = None) -> "CovariateProfile":
        """Return the profile with one covariate (or all when index is None) sign-swapped."""
        vals = [(-v if index is None or i == index else v) for i, v in enumerate(self.values)]
        return CovariateProfile(values=tuple(vals))


class ModelSpec(BaseModel):
    """Which covariates enter the mean, structural-SD and residual-SD regressions."""

    model_config = ConfigDict(frozen=True)

    mean_mask: Tuple[bool, ...] = ()
    structural_mask: Tuple[bool, ...] = ()
    residual_mask: Tuple[bool, ...] = ()

    @model_validator(mode="after")
    def _same_arity(self) -> "ModelSpec":
        if not (len(self.mean_mask) == len(self.structural_mask) == len(self.residual_mask)):
            raise ValueError("mask lengths differ")
        return self

    @property
    def arity(self) -> int:
        return len(self.mean_mask)

    def mask(self, component: Component) -> Tuple[bool, ...]:
        if component == Component.MEAN:
            return self.mean_mask
        if component == Component.STRUCTURAL:
            return self.structural_mask
        return self.residual_mask

    @property
    def n_free_beta(self) -> int:
        return sum(self.mean_mask) + sum(self.structural_mask) + sum(self.residual_mask)

    @property
    def n_parameters(self) -> int:
        # intercepts plus free coefficients; random effects are integrated out
        return 3 + self.n_free_beta

    def free_mask(self) -> np.ndarray:
        """Boolean vector over the natural-scale theta layout marking free coordinates."""
        return np.array(
            [True, *self.mean_mask, True, *self.structural_mask, True, *self.residual_mask],
            dtype=bool,
        )

    def with_effect(self, component: Component, index: int, present: bool) -> "ModelSpec":
        masks = {
            Component.MEAN: list(self.mean_mask),
            Component.STRUCTURAL: list(self.structural_mask),
            Component.RESIDUAL: list(self.residual_mask),
        }
        masks[component][index] = present
        return ModelSpec(
            mean_mask=tuple(masks[Component.MEAN]),
            structural_mask=tuple(masks[Component.STRUCTURAL]),
            residual_mask=tuple(masks[Component.RESIDUAL]),
        )

    def contains(self, other: "ModelSpec") -> bool:
        """True when every effect present in `other` is also present here."""
        for c in Component:
            if any(o and not s for s, o in zip(self.mask(c), other.mask(c))):
                return False
        return True

    def describe(self, schema: "CovariateSchema") -> Dict[str, str]:
        out: Dict[str, str] = {}
        for c in Component:
            names = [n for n, on in zip(schema.names, self.mask(c)) if on]
            out[c.value] = " & ".join(names) if names else "None"
        return out

    @classmethod
    def null(cls, arity: int) -> "ModelSpec":
        off = (False,) * arity
        return cls(mean_mask=off, structural_mask=off, residual_mask=off)

    @classmethod
    def full(cls, arity: int) -> "ModelSpec":
        on = (True,) * arity
        return cls(mean_mask=on, structural_mask=on, residual_mask=on)


class ParameterVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha_mu: float
    beta_mu: Tuple[float, ...] = ()
    alpha_gamma: float = Field(gt=0)
    beta_gamma: Tuple[float, ...] = ()
    alpha_epsilon: float = Field(gt=0)
    beta_epsilon: Tuple[float, ...] = ()

    @model_validator(mode="after")
    def _same_arity(self) -> "ParameterVector":
        if not (len(self.beta_mu) == len(self.beta_gamma) == len(self.beta_epsilon)):
            raise ValueError("coefficient vectors differ in length")
        return self

    @property
    def arity(self) -> int:
        return len(self.beta_mu)

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.alpha_mu, *self.beta_mu, self.alpha_gamma, *self.beta_gamma,
             self.alpha_epsilon, *self.beta_epsilon],
            dtype=float,
        )

    @classmethod
    def from_array(cls, theta: np.ndarray, arity: int) -> "ParameterVector":
        lay = theta_layout(arity)
        t = np.asarray(theta, dtype=float)
        return cls(
            alpha_mu=float(t[lay.alpha_mu]),
            beta_mu=tuple(float(x) for x in t[lay.beta_mu]),
            alpha_gamma=float(t[lay.alpha_gamma]),
            beta_gamma=tuple(float(x) for x in t[lay.beta_gamma]),
            alpha_epsilon=float(t[lay.alpha_epsilon]),
            beta_epsilon=tuple(float(x) for x in t[lay.beta_epsilon]),
        )

    def respects(self, spec: ModelSpec) -> bool:
        if spec.arity != self.arity:
            return False
        theta = self.to_array()
        return bool(np.all(theta[~spec.free_mask()] == 0.0))


PRIOR_PRESETS: Dict[str, float] = {"small": 0.25, "medium": 0.5, "large": 1.0}


class PriorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    # SD of the normal prior on every regression coefficient
    sigma_beta: float = Field(0.5, gt=0)
    mu_alpha_mu: float = 0.0
    sd_alpha_mu: float = Field(1.0, gt=0)
    sd_alpha_gamma: float = Field(1.0, gt=0)
    sd_alpha_epsilon: float = Field(1.0, gt=0)

    @classmethod
    def preset(cls, value: Union[str, float]) -> "PriorConfig":
        """Resolve "small"/"medium"/"large" or a numeric sigma_beta."""
        if isinstance(value, str):
            key = value.strip().lower()
            if key in PRIOR_PRESETS:
                return cls(sigma_beta=PRIOR_PRESETS[key])
            try:
                value = float(key)
            except ValueError:
                raise PriorError(f"unknown prior preset {value!r}") from None
        if not (math.isfinite(value) and value > 0):
            raise PriorError(f"prior sigma must be a positive number, got {value!r}")
        return cls(sigma_beta=float(value))

    @property
    def label(self) -> str:
        for name, sigma in PRIOR_PRESETS.items():
            if sigma == self.sigma_beta:
                return name
        return f"{self.sigma_beta:g}"


__all__ = [
    "Component",
    "ThetaLayout",
    "theta_layout",
    "CovariateSchema",
    "CovariateProfile",
    "ModelSpec",
    "ParameterVector",
    "PRIOR_PRESETS",
    "PriorConfig",
]
