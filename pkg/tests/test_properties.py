import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from estimation.averaging import bma_mix, stacking_weights
from estimation.evidence import bayes_factor, inclusion_bf, posterior_model_probs
from estimation.likelihood import marginal_loglik
from estimation.models import InclusionTarget, ModelEvidence, WeightMethod, WeightVector
from shared.models import Component, CovariateSchema, ModelSpec, ParameterVector
from shared.reliability import enumerate_models, ratee_moments
from shared.streams import substream
from tests.test_helpers import fake_draws, fast_settings, make_table, one_covariate_specs


def random_instance(rng):
    k = int(rng.integers(0, 3))
    ratees = int(rng.integers(1, 7))
    rows = [rng.normal(size=int(rng.integers(1, 6))).tolist() for _ in range(ratees)]
    profiles = rng.choice([-0.5, 0.5], size=(ratees, k))
    names = tuple(f"c{c}" for c in range(k))
    table = make_table(rows, profiles=profiles, names=names)
    params = ParameterVector(
        alpha_mu=float(rng.normal()),
        beta_mu=tuple(rng.normal(scale=0.5, size=k)),
        alpha_gamma=float(rng.uniform(0.2, 1.5)),
        beta_gamma=tuple(rng.normal(scale=0.5, size=k)),
        alpha_epsilon=float(rng.uniform(0.2, 1.5)),
        beta_epsilon=tuple(rng.normal(scale=0.5, size=k)),
    )
    return table, params


def dense_loglik(table, params, k):
    mu, sg, se = ratee_moments(params.to_array(), table.profiles, k)
    total = 0.0
    for i in range(table.n_ratees):
        y = table.ratings[table.ratee_ids == i]
        cov = se[i] ** 2 * np.eye(y.size) + sg[i] ** 2 * np.ones((y.size, y.size))
        total += multivariate_normal.logpdf(y, np.full(y.size, mu[i]), cov)
    return total


def test_marginal_loglik_matches_dense_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        table, params = random_instance(rng)
        k = table.covariates.arity
        got = marginal_loglik(table, ModelSpec.full(k), params)
        assert got == pytest.approx(dense_loglik(table, params, k), abs=1e-8)


def test_marginal_loglik_ignores_rating_and_ratee_order():
    rows = [[0.3, -0.2, 1.1], [0.8, 0.4], [-1.0, -0.5, -0.7, 0.2]]
    profiles = [[0.5], [-0.5], [0.5]]
    params = ParameterVector(alpha_mu=0.1, beta_mu=(0.2,), alpha_gamma=0.7, beta_gamma=(0.1,),
                             alpha_epsilon=0.8, beta_epsilon=(-0.3,))
    spec = ModelSpec.full(1)
    base = marginal_loglik(make_table(rows, profiles, ("g",)), spec, params)
    shuffled = [[1.1, 0.3, -0.2], [0.4, 0.8], [0.2, -0.7, -1.0, -0.5]]
    assert marginal_loglik(make_table(shuffled, profiles, ("g",)), spec, params) == pytest.approx(base, abs=1e-10)
    reordered = marginal_loglik(make_table(rows[::-1], profiles[::-1], ("g",)), spec, params)
    assert reordered == pytest.approx(base, abs=1e-10)


def random_evidences(rng, specs):
    priors = rng.dirichlet(np.ones(len(specs)))
    priors = priors / priors.sum()
    evidences = [ModelEvidence(spec=s, log_marglik=float(rng.normal(scale=5.0)), prior_prob=float(p))
                 for s, p in zip(specs, priors)]
    return posterior_model_probs(evidences)


def test_posterior_probabilities_sum_to_one():
    rng = np.random.default_rng(1)
    specs = one_covariate_specs()
    for _ in range(50):
        ev = random_evidences(rng, specs)
        assert sum(e.posterior_prob for e in ev) == pytest.approx(1.0, abs=1e-12)


def test_inclusion_bf_identities():
    rng = np.random.default_rng(2)
    specs = one_covariate_specs()
    target = InclusionTarget(component=Component.STRUCTURAL, covariate=0)
    for _ in range(50):
        ev = random_evidences(rng, specs)
        res = inclusion_bf(ev, target)
        assert res.bf_inclusion == pytest.approx(res.posterior_incl_odds / res.prior_incl_odds, rel=1e-12)

    # with one model on each side the inclusion BF is the plain Bayes factor
    pair = [specs[0], specs[2]]
    ev = posterior_model_probs([
        ModelEvidence(spec=pair[0], log_marglik=-4.0, prior_prob=0.3),
        ModelEvidence(spec=pair[1], log_marglik=-2.5, prior_prob=0.7),
    ])
    assert inclusion_bf(ev, target).bf_inclusion == pytest.approx(bayes_factor(-2.5, -4.0), rel=1e-12)


def test_stacking_beats_every_single_model():
    rng = np.random.default_rng(3)
    for _ in range(10):
        lpd = rng.normal(scale=2.0, size=(40, 4))
        w = stacking_weights(lpd, fast_settings()).as_array()
        dens = np.exp(lpd)
        best = np.sum(np.log(dens @ w))
        for m in range(4):
            assert best >= np.sum(lpd[:, m]) - 1e-8
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-10)


def test_mixture_label_frequencies_follow_weights():
    a = fake_draws(ModelSpec.null(1), [0.0, 0.0, 0.5, 0.0, 0.5, 0.0])
    b = fake_draws(ModelSpec.full(1), [1.0, 0.0, 0.5, 0.0, 0.5, 0.0])
    total = 100_000
    mixed = bma_mix([a, b], WeightVector(method=WeightMethod.BMA, weights=(0.5, 0.5)), total, substream(4))
    se = math.sqrt(0.25 / total)
    assert mixed.label_frequencies()[0] == pytest.approx(0.5, abs=3 * se)
    # mixture mean is the weighted mean of the model means
    assert mixed.draws[:, 0].mean() == pytest.approx(mixed.label_frequencies()[1], abs=1e-12)


def test_model_space_enumeration_is_stable():
    schema = CovariateSchema(names=("a", "b"))
    first = enumerate_models(schema)
    assert first == enumerate_models(schema)
    assert len(set(first)) == 64
