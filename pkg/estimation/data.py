"""Rating tables: CSV ingestion/export, the simulation scenarios and data generation."""

from __future__ import annotations
from functools import cached_property
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from shared.errors import DomainError, RatingsParseError, RatingsValidationError, SchemaError
from shared.models import CovariateProfile, CovariateSchema, ModelSpec, ParameterVector
from shared.reliability import effect_code, irr, linked_mean, linked_sd, profiles_for
from shared.streams import inverse_cdf_normal, substream

logger = logging.getLogger(__name__)

RATEE_COLUMN = "ratee"
RATING_COLUMN = "rating"


class RatingsTable(BaseModel):
    """Long-format ratings: one entry per rating plus one profile per ratee."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    covariates: CovariateSchema = Field(default_factory=CovariateSchema)
    ratee_keys: Tuple[str, ...]
    # index into ratee_keys for every rating
    ratee_ids: np.ndarray
    ratings: np.ndarray
    # (n_ratees, K) effect-coded
    profiles: np.ndarray
    # (label coded -0.5, label coded +0.5) per covariate
    labels: Tuple[Tuple[str, str], ...] = ()

    @model_validator(mode="after")
    def _check(self) -> "RatingsTable":
        n_ratees = len(self.ratee_keys)
        k = self.covariates.arity
        if self.ratee_ids.shape != self.ratings.shape or self.ratings.ndim != 1:
            raise RatingsValidationError("ratee ids and ratings must be equal-length vectors")
        if self.profiles.shape != (n_ratees, k):
            raise RatingsValidationError(f"profiles must have shape ({n_ratees}, {k})")
        if len(self.labels) != k:
            raise RatingsValidationError("one label pair per covariate required")
        if self.ratings.size and (self.ratee_ids.min() < 0 or self.ratee_ids.max() >= n_ratees):
            raise RatingsValidationError("rating refers to an unknown ratee")
        if not np.all(np.isfinite(self.ratings)):
            raise RatingsValidationError("ratings must be finite")
        counts = np.bincount(self.ratee_ids, minlength=n_ratees)
        empty = [self.ratee_keys[i] for i in np.flatnonzero(counts == 0)]
        if empty:
            raise RatingsValidationError(f"ratees without ratings: {empty}", empty)
        if k and not np.all(np.isin(self.profiles, (-0.5, 0.5))):
            raise RatingsValidationError("profiles must be effect coded")
        return self

    @property
    def n_ratees(self) -> int:
        return len(self.ratee_keys)

    @property
    def n_ratings(self) -> int:
        return int(self.ratings.size)

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.ratee_ids, minlength=self.n_ratees).astype(float)

    @cached_property
    def sums(self) -> np.ndarray:
        return np.bincount(self.ratee_ids, weights=self.ratings, minlength=self.n_ratees)

    @cached_property
    def means(self) -> np.ndarray:
        return self.sums / self.counts

    @cached_property
    def within_ss(self) -> np.ndarray:
        """Per-ratee sum of squared deviations from the ratee mean."""
        resid = self.ratings - self.means[self.ratee_ids]
        return np.bincount(self.ratee_ids, weights=resid * resid, minlength=self.n_ratees)

    def profile(self, ratee: int) -> CovariateProfile:
        return CovariateProfile(values=tuple(float(v) for v in self.profiles[ratee]))

    def group_sizes(self, covariate: int) -> Dict[str, int]:
        """Number of ratees per label of one covariate."""
        low, high = self.labels[covariate]
        col = self.profiles[:, covariate]
        return {low: int(np.sum(col < 0)), high: int(np.sum(col > 0))}

    def with_ratings(self, ratings: np.ndarray) -> "RatingsTable":
        """Same design (ratees, profiles) with replaced rating values."""
        return RatingsTable(
            covariates=self.covariates,
            ratee_keys=self.ratee_keys,
            ratee_ids=self.ratee_ids,
            ratings=np.asarray(ratings, dtype=float),
            profiles=self.profiles,
            labels=self.labels,
        )


def load_csv(path: Union[str, Path], schema: CovariateSchema) -> RatingsTable:
    """Read a long-format CSV with `ratee`, `rating` and one column per covariate."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise RatingsParseError("file is empty", 1) from None
    except pd.errors.ParserError as e:
        raise RatingsParseError(f"malformed CSV: {e}") from None
    except UnicodeDecodeError as e:
        raise RatingsParseError(f"not valid UTF-8 text (byte offset {e.start})") from None
    frame.columns = [c.strip() for c in frame.columns]
    required = [RATEE_COLUMN, RATING_COLUMN, *schema.names]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")

    text = frame[RATING_COLUMN].str.strip()
    coerced = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(coerced))
    if bad.size:
        # header is line 1
        line = int(bad[0]) + 2
        raise RatingsParseError(f"rating {frame[RATING_COLUMN].iloc[bad[0]]!r} is not a finite number", line)
    # correctly rounded, so write_csv output reads back bit for bit
    ratings = text.astype(float).to_numpy()

    keys = frame[RATEE_COLUMN].str.strip()
    if (keys == "").any():
        raise RatingsParseError("empty ratee key", int(np.flatnonzero(keys == "")[0]) + 2)
    ratee_keys = list(pd.unique(keys))
    index = {k: i for i, k in enumerate(ratee_keys)}
    ratee_ids = keys.map(index).to_numpy(dtype=np.int64)

    profiles = np.zeros((len(ratee_keys), schema.arity))
    labels: List[Tuple[str, str]] = []
    for c, name in enumerate(schema.names):
        column = frame[name].str.strip()
        per_ratee = column.groupby(keys, sort=False).nunique()
        inconsistent = [str(k) for k in per_ratee.index[per_ratee > 1]]
        if inconsistent:
            raise RatingsValidationError(
                f"covariate {name!r} is not constant within ratee(s) {', '.join(inconsistent)}",
                inconsistent,
            )
        coding = effect_code(column)
        low, high = sorted(coding, key=coding.get)
        labels.append((low, high))
        first = column.groupby(keys, sort=False).first()
        profiles[:, c] = [coding[first[k]] for k in ratee_keys]

    table = RatingsTable(
        covariates=schema,
        ratee_keys=tuple(ratee_keys),
        ratee_ids=ratee_ids,
        ratings=ratings,
        profiles=profiles,
        labels=tuple(labels),
    )
    logger.info("Loaded %d ratings of %d ratees from %s", table.n_ratings, table.n_ratees, path)
    return table


def write_csv(table: RatingsTable, path: Union[str, Path]) -> None:
    frame = pd.DataFrame({
        RATEE_COLUMN: [table.ratee_keys[i] for i in table.ratee_ids],
        RATING_COLUMN: table.ratings,
    })
    for c, name in enumerate(table.covariates.names):
        low, high = table.labels[c]
        codes = table.profiles[table.ratee_ids, c]
        frame[name] = np.where(codes < 0, low, high)
    frame.to_csv(path, index=False, encoding="utf-8")


class ScenarioConfig(BaseModel):
    """Two-group generating values; group 1 is coded -0.5, group 2 +0.5."""

    model_config = ConfigDict(frozen=True)

    name: str
    mu1: float
    mu2: float
    sg1: float = Field(ge=0)
    sg2: float = Field(ge=0)
    se1: float = Field(gt=0)
    se2: float = Field(gt=0)
    ratees_per_group: Optional[int] = Field(None, ge=1)
    ratings_per_ratee: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = Field(None, ge=0, lt=2 ** 64)

    def with_design(self, ratees_per_group: int, ratings_per_ratee: int, seed: int) -> "ScenarioConfig":
        return ScenarioConfig.model_validate({
            **self.model_dump(),
            "ratees_per_group": ratees_per_group,
            "ratings_per_ratee": ratings_per_ratee,
            "seed": seed,
        })

    def irrs(self) -> Tuple[float, float]:
        return irr(self.sg1, self.se1), irr(self.sg2, self.se2)


SCENARIO_SCHEMA = CovariateSchema(names=("group",))
SCENARIO_LABELS = ("g1", "g2")

# name, mu1, mu2, sg1, sg2, se1, se2
_SCENARIO_ROWS = [
    ("1", 0.00, 0.00, 0.67, 0.67, 0.74, 0.74),
    ("2", 0.00, 0.00, 0.67, 0.67, 0.67, 0.82),
    ("3", 0.00, 0.00, 0.60, 0.74, 0.74, 0.74),
    ("4.1", 0.00, 0.00, 0.60, 0.73, 0.66, 0.81),
    ("4.2", 0.00, 0.00, 0.73, 0.60, 0.66, 0.81),
    ("5", -0.20, 0.20, 0.67, 0.67, 0.74, 0.74),
    ("6", -0.20, 0.20, 0.67, 0.67, 0.67, 0.82),
    ("7", -0.20, 0.20, 0.60, 0.74, 0.74, 0.74),
    ("8.1", -0.20, 0.20, 0.60, 0.73, 0.66, 0.81),
    ("8.2", -0.20, 0.20, 0.73, 0.60, 0.66, 0.81),
]


def scenario_table() -> List[ScenarioConfig]:
    return [
        ScenarioConfig(name=n, mu1=m1, mu2=m2, sg1=g1, sg2=g2, se1=e1, se2=e2)
        for n, m1, m2, g1, g2, e1, e2 in _SCENARIO_ROWS
    ]


def get_scenario(name: str) -> ScenarioConfig:
    for s in scenario_table():
        if s.name == name:
            return s
    raise KeyError(f"unknown scenario {name!r}")


def true_parameters(config: ScenarioConfig) -> ParameterVector:
    """Effect-coded parameters reproducing the two groups' values exactly."""
    if min(config.sg1, config.sg2) <= 0:
        raise DomainError(f"scenario {config.name!r} has no structural variance; the log link is undefined")
    return ParameterVector(
        alpha_mu=(config.mu1 + config.mu2) / 2.0,
        beta_mu=(config.mu2 - config.mu1,),
        alpha_gamma=math.sqrt(config.sg1 * config.sg2),
        beta_gamma=(math.log(config.sg2 / config.sg1),),
        alpha_epsilon=math.sqrt(config.se1 * config.se2),
        beta_epsilon=(math.log(config.se2 / config.se1),),
    )


def generating_spec(config: ScenarioConfig) -> ModelSpec:
    # masks follow parameter inequalities, not IRR equality (4.1 differs in variances)
    return ModelSpec(
        mean_mask=(config.mu1 != config.mu2,),
        structural_mask=(config.sg1 != config.sg2,),
        residual_mask=(config.se1 != config.se2,),
    )


def _draw_ratings(seed: int, mu: np.ndarray, sg: np.ndarray, se: np.ndarray, per_ratee: int) -> np.ndarray:
    """One independent stream per ratee: a structural draw followed by the residual draws."""
    out = np.empty((mu.size, per_ratee))
    for r in range(mu.size):
        z = inverse_cdf_normal(substream(seed, r), per_ratee + 1)
        out[r] = mu[r] + sg[r] * z[0] + se[r] * z[1:]
    return out


def _design_table(
    schema: CovariateSchema,
    labels: Sequence[Tuple[str, str]],
    profiles: np.ndarray,
    ratings: np.ndarray,
) -> RatingsTable:
    n_ratees, per_ratee = ratings.shape
    return RatingsTable(
        covariates=schema,
        ratee_keys=tuple(str(r + 1) for r in range(n_ratees)),
        ratee_ids=np.repeat(np.arange(n_ratees, dtype=np.int64), per_ratee),
        ratings=ratings.reshape(-1),
        profiles=profiles,
        labels=tuple(tuple(l) for l in labels),
    )


def simulate_dataset(config: ScenarioConfig) -> RatingsTable:
    if config.ratees_per_group is None or config.ratings_per_ratee is None or config.seed is None:
        raise ValueError(f"scenario {config.name!r} has no design (I, J, seed) set")
    n = config.ratees_per_group
    group2 = np.repeat([False, True], n)
    mu = np.where(group2, config.mu2, config.mu1)
    sg = np.where(group2, config.sg2, config.sg1)
    se = np.where(group2, config.se2, config.se1)
    ratings = _draw_ratings(config.seed, mu, sg, se, config.ratings_per_ratee)
    profiles = np.where(group2, 0.5, -0.5)[:, None]
    return _design_table(SCENARIO_SCHEMA, [SCENARIO_LABELS], profiles, ratings)


def simulate_from_parameters(
    schema: CovariateSchema,
    params: ParameterVector,
    ratees_per_cell: int,
    ratings_per_ratee: int,
    seed: int,
) -> RatingsTable:
    """Generate a balanced table with `ratees_per_cell` ratees in every covariate profile."""
    cells = profiles_for(schema)
    mu, sg, se, prof = [], [], [], []
    for p in cells:
        m = linked_mean(params.alpha_mu, params.beta_mu, p)
        g = linked_sd(params.alpha_gamma, params.beta_gamma, p)
        e = linked_sd(params.alpha_epsilon, params.beta_epsilon, p)
        for _ in range(ratees_per_cell):
            mu.append(m)
            sg.append(g)
            se.append(e)
            prof.append(p.values)
    ratings = _draw_ratings(seed, np.array(mu), np.array(sg), np.array(se), ratings_per_ratee)
    labels = [(f"{n}=0", f"{n}=1") for n in schema.names]
    profiles = np.array(prof, dtype=float).reshape(len(prof), schema.arity)
    return _design_table(schema, labels, profiles, ratings)


__all__ = [
    "RatingsTable",
    "load_csv",
    "write_csv",
    "ScenarioConfig",
    "SCENARIO_SCHEMA",
    "scenario_table",
    "get_scenario",
    "true_parameters",
    "generating_spec",
    "simulate_dataset",
    "simulate_from_parameters",
]
