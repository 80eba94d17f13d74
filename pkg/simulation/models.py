from __future__ import annotations
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from estimation.averaging import AVERAGING_METHODS, SELECTION_METHODS
from estimation.data import scenario_table
from estimation.models import SamplerConfig
from shared.errors import PlanError
from shared.models import ModelSpec, PriorConfig

ALLOWED_RATEES = (25, 50, 100, 200)
ALLOWED_RATINGS = (3, 5)


class StudyPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenarios: List[str]
    ratees_per_group: List[int]
    ratings_per_ratee: List[int]
    replications: int = Field(ge=1)
    selection_methods: List[str] = Field(default_factory=lambda: list(SELECTION_METHODS))
    averaging_methods: List[str] = Field(default_factory=lambda: list(AVERAGING_METHODS))
    seed: int = Field(20240101, ge=0, lt=2 ** 64)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    stepwise_alpha: float = Field(0.05, gt=0, le=1)
    boundary_mixture: bool = False

    @field_validator("scenarios")
    @classmethod
    def _known_scenarios(cls, v: List[str]) -> List[str]:
        known = [s.name for s in scenario_table()]
        unknown = [s for s in v if s not in known]
        if not v or unknown:
            raise PlanError(f"unknown or empty scenario selection {unknown or v}; choose from {known}")
        return v

    @field_validator("ratees_per_group")
    @classmethod
    def _ratees(cls, v: List[int]) -> List[int]:
        if not v or any(i not in ALLOWED_RATEES for i in v):
            raise PlanError(f"ratees per group must be a nonempty subset of {ALLOWED_RATEES}")
        return v

    @field_validator("ratings_per_ratee")
    @classmethod
    def _ratings(cls, v: List[int]) -> List[int]:
        if not v or any(j not in ALLOWED_RATINGS for j in v):
            raise PlanError(f"ratings per ratee must be a nonempty subset of {ALLOWED_RATINGS}")
        return v

    @model_validator(mode="after")
    def _methods(self) -> "StudyPlan":
        bad = [m for m in self.selection_methods if m not in SELECTION_METHODS]
        bad += [m for m in self.averaging_methods if m not in AVERAGING_METHODS]
        if bad:
            raise PlanError(f"unknown method(s): {', '.join(bad)}")
        if not (self.selection_methods or self.averaging_methods):
            raise PlanError("no methods selected")
        return self

    def conditions(self) -> List["Condition"]:
        """Scenario slowest, then ratees, then ratings per ratee."""
        return [
            Condition(scenario=s, ratees_per_group=i, ratings_per_ratee=j)
            for s in self.scenarios
            for i in self.ratees_per_group
            for j in self.ratings_per_ratee
        ]

    @property
    def methods(self) -> List[str]:
        return [*self.selection_methods, *self.averaging_methods]


class Condition(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: str
    ratees_per_group: int
    ratings_per_ratee: int

    @property
    def key(self) -> Tuple[str, int, int]:
        return (self.scenario, self.ratees_per_group, self.ratings_per_ratee)


class GroupEstimates(BaseModel):
    """Group-level point estimates; group 1 is coded -0.5."""

    model_config = ConfigDict(frozen=True)

    mu1: float
    mu2: float
    sg1: float
    sg2: float
    se1: float
    se2: float
    irr1: float
    irr2: float


class ReplicationRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    condition: Condition
    replication: int
    truth: ModelSpec
    selected: Dict[str, ModelSpec] = Field(default_factory=dict)
    estimates: Dict[str, GroupEstimates] = Field(default_factory=dict)
    # inclusion BF per component for the single covariate
    inclusion_bf: Dict[str, float] = Field(default_factory=dict)
    failure: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failure is None


class MetricRow(BaseModel):
    """One number of the study; scenario "all" marks rows pooled across scenarios."""

    model_config = ConfigDict(frozen=True)

    scenario: str
    ratees_per_group: int
    ratings_per_ratee: int
    method: str
    metric: str
    value: float
    se: Optional[float] = None
    n: int = 0


class SimulationMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: List[MetricRow] = Field(default_factory=list)
    failures: Dict[str, int] = Field(default_factory=dict)
    # conditions with more than 5% failed replications
    flagged: List[str] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)

    def value(self, scenario: str, ratees: int, ratings: int, method: str, metric: str) -> Optional[MetricRow]:
        for r in self.rows:
            if (r.scenario, r.ratees_per_group, r.ratings_per_ratee, r.method, r.metric) == (
                scenario, ratees, ratings, method, metric,
            ):
                return r
        return None


class StudyResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    plan: StudyPlan
    records: List[ReplicationRecord]
    metrics: SimulationMetrics


def condition_label(key: Tuple[str, int, int]) -> str:
    s, i, j = key
    return f"scenario={s},I={i},J={j}"


__all__ = [
    "ALLOWED_RATEES",
    "ALLOWED_RATINGS",
    "StudyPlan",
    "Condition",
    "GroupEstimates",
    "ReplicationRecord",
    "MetricRow",
    "SimulationMetrics",
    "StudyResult",
    "condition_label",
]
