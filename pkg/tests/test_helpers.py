import math

import numpy as np
from scipy.stats import norm

from estimation.config import Settings
from estimation.data import RatingsTable, get_scenario, simulate_dataset
from estimation.likelihood import marginal_loglik
from estimation.models import BridgeEstimate, ModelFit, PosteriorDraws, SamplerConfig
from shared.models import CovariateSchema, ModelSpec, ParameterVector
from shared.reliability import enumerate_models
from simulation.models import Condition, GroupEstimates, ReplicationRecord, StudyPlan


def make_table(ratings_per_ratee, profiles=None, names=(), labels=None):
    """Build a table from a list of per-ratee rating lists."""
    ids = np.concatenate([np.full(len(r), i, dtype=np.int64) for i, r in enumerate(ratings_per_ratee)])
    ratings = np.concatenate([np.asarray(r, dtype=float) for r in ratings_per_ratee])
    n = len(ratings_per_ratee)
    k = len(names)
    if profiles is None:
        profiles = np.zeros((n, k))
    if labels is None:
        labels = tuple((f"{c}=0", f"{c}=1") for c in names)
    return RatingsTable(
        covariates=CovariateSchema(names=tuple(names)),
        ratee_keys=tuple(str(i + 1) for i in range(n)),
        ratee_ids=ids,
        ratings=ratings,
        profiles=np.asarray(profiles, dtype=float).reshape(n, k),
        labels=labels,
    )


def scenario_data(name="1", ratees=50, ratings=3, seed=7):
    return simulate_dataset(get_scenario(name).with_design(ratees, ratings, seed))


def small_sampler(seed=11, warmup=300, draws=300, chains=2):
    return SamplerConfig(chains=chains, warmup=warmup, draws_per_chain=draws, seed=seed)


def fast_settings(**overrides):
    fields = dict(
        optimizer_restarts=1,
        bootstrap_resamples=20,
        mixture_draws=500,
        criteria_max_draws=200,
        workers=1,
        chain_workers=1,
    )
    fields.update(overrides)
    return Settings(**fields)


def evidence_fit(spec, log_marglik):
    """A ModelFit carrying only a bridge estimate."""
    bridge = None if not np.isfinite(log_marglik) else BridgeEstimate(log_marglik=log_marglik, mcse=0.0, iterations=1)
    return ModelFit(spec=spec, bridge=bridge)


def fake_draws(spec, theta, n=200, chains=2, seed=0):
    """PosteriorDraws whose rows all equal `theta`."""
    rows = np.tile(np.asarray(theta, dtype=float), (n, 1))
    return PosteriorDraws(
        spec=spec,
        draws=rows,
        unconstrained=rows[:, :1],
        log_density=np.zeros(n),
        chains=chains,
        draws_per_chain=n // chains,
        seed=seed,
    )


def one_covariate_specs():
    return enumerate_models(CovariateSchema(names=("group",)))


# scenario 1: no difference in any component
CONDITION = Condition(scenario="1", ratees_per_group=25, ratings_per_ratee=3)


def truth_estimates(shift=0.0):
    s = get_scenario("1")
    irr1, irr2 = s.irrs()
    return GroupEstimates(mu1=s.mu1 + shift, mu2=s.mu2 + shift, sg1=s.sg1 + shift, sg2=s.sg2 + shift,
                          se1=s.se1 + shift, se2=s.se2 + shift, irr1=irr1 + shift, irr2=irr2 + shift)


def record(rep, selected=None, estimates=None, bf=1.0, failure=None, condition=CONDITION):
    return ReplicationRecord(
        condition=condition,
        replication=rep,
        truth=ModelSpec.null(1),
        selected=selected or {},
        estimates=estimates or {},
        inclusion_bf={"mean": bf, "structural": bf, "residual": bf},
        failure=failure,
    )


def tiny_plan(**overrides):
    fields = dict(
        scenarios=["1"],
        ratees_per_group=[25],
        ratings_per_ratee=[3],
        replications=1,
        selection_methods=["bf", "aic"],
        averaging_methods=["bma", "full"],
        sampler=SamplerConfig(chains=2, warmup=200, draws_per_chain=200),
        seed=5,
    )
    fields.update(overrides)
    return StudyPlan(**fields)



def conjugate_logml(table, sg, se, prior_sd=1.0, at=0.3):
    """Closed-form log marginal likelihood of the constant-mean model with known SDs.

    log p(y) = log p(y | a) + log p(a) - log p(a | y), at any a.
    """
    v = sg ** 2 + se ** 2 / table.counts
    precision = 1.0 / prior_sd ** 2 + np.sum(1.0 / v)
    mean = np.sum(table.means / v) / precision
    params = ParameterVector(alpha_mu=at, alpha_gamma=sg, alpha_epsilon=se)
    return (
        marginal_loglik(table, ModelSpec(), params)
        + norm.logpdf(at, 0.0, prior_sd)
        - norm.logpdf(at, mean, 1.0 / math.sqrt(precision))
    )
