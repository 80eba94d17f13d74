import math

import numpy as np
import pytest

from estimation.evidence import (
    bayes_factor,
    bridge_logml,
    evidence_label,
    inclusion_bf,
    inclusion_table,
    posterior_model_probs,
    uniform_model_priors,
)
from estimation.models import (
    EvidenceDirection,
    EvidenceStrength,
    InclusionTarget,
    ModelEvidence,
    SamplerConfig,
)
from estimation.sampler import sample_posterior
from shared.errors import BridgeConvergenceError, DegenerateEvidenceError, DegenerateProposalError, PartitionError
from shared.models import Component, CovariateSchema, ModelSpec, PriorConfig
from tests.test_helpers import conjugate_logml, fast_settings, make_table, one_covariate_specs

SCALES = (0.5, 0.6)
ROWS = [[0.9, 1.4, 1.1], [0.2, 0.5], [1.8, 1.2, 1.6, 1.0], [0.7], [1.3, 0.8]]


def conjugate_draws(seed=5):
    table = make_table(ROWS)
    cfg = SamplerConfig(chains=4, warmup=1000, draws_per_chain=2000, seed=seed)
    return table, sample_posterior(table, ModelSpec(), PriorConfig(), cfg, fixed_scales=SCALES)


def evidences(log_mls, specs=None):
    specs = specs or one_covariate_specs()[: len(log_mls)]
    priors = uniform_model_priors(len(log_mls))
    return [ModelEvidence(spec=s, log_marglik=l, prior_prob=p) for s, l, p in zip(specs, log_mls, priors)]


def test_analytic_identity_holds_anywhere():
    table = make_table(ROWS)
    assert conjugate_logml(table, *SCALES, at=-1.0) == pytest.approx(conjugate_logml(table, *SCALES, at=2.0))


def test_bridge_matches_conjugate_marginal_likelihood():
    table, draws = conjugate_draws()
    est = bridge_logml(draws, table, ModelSpec(), PriorConfig(), settings=fast_settings())
    assert est.log_marglik == pytest.approx(conjugate_logml(table, *SCALES), abs=0.05)
    assert est.mcse < 0.05
    assert est.iterations >= 1


def test_bridge_is_reproducible():
    table, draws = conjugate_draws(seed=9)
    a = bridge_logml(draws, table, ModelSpec(), PriorConfig(), settings=fast_settings())
    b = bridge_logml(draws, table, ModelSpec(), PriorConfig(), settings=fast_settings())
    assert a.log_marglik == b.log_marglik


def test_bridge_rejects_a_singular_proposal():
    table, draws = conjugate_draws()
    with pytest.raises(DegenerateProposalError):
        bridge_logml(draws, table, ModelSpec(), PriorConfig(), proposal=(np.zeros(1), np.zeros((1, 1))))


def test_bridge_reports_non_convergence():
    table, draws = conjugate_draws()
    settings = fast_settings(bridge_max_iter=1, bridge_tolerance=1e-300)
    with pytest.raises(BridgeConvergenceError):
        bridge_logml(draws, table, ModelSpec(), PriorConfig(), settings=settings)


def test_bayes_factor():
    assert bayes_factor(-10.0, -12.0) == pytest.approx(math.exp(2.0))
    assert bayes_factor(-3.0, -3.0) == 1.0
    with pytest.raises(ValueError):
        bayes_factor(float("-inf"), 0.0)


def test_posterior_model_probabilities():
    ev = evidences([-10.0, -10.0 + math.log(3)] + [float("-inf")] * 6)
    probs = [e.posterior_prob for e in posterior_model_probs(ev)]
    assert probs[:2] == pytest.approx([0.25, 0.75])
    assert probs[2:] == [0.0] * 6


def test_posterior_model_probabilities_ignore_a_common_shift():
    base = [-1.0, -2.5, -0.3, -4.0]
    a = [e.posterior_prob for e in posterior_model_probs(evidences(base))]
    b = [e.posterior_prob for e in posterior_model_probs(evidences([x - 5000.0 for x in base]))]
    assert a == pytest.approx(b)
    assert sum(a) == pytest.approx(1.0)


def test_posterior_model_probabilities_need_a_finite_model():
    with pytest.raises(DegenerateEvidenceError):
        posterior_model_probs(evidences([float("-inf")] * 3))


def test_inclusion_bf_examples():
    specs = one_covariate_specs()
    # residual-difference models hold 0.9 of the posterior mass
    log_mls = [math.log(0.1 / 4) if not s.residual_mask[0] else math.log(0.9 / 4) for s in specs]
    ev = posterior_model_probs(evidences(log_mls, specs))
    res = inclusion_bf(ev, InclusionTarget(component=Component.RESIDUAL, covariate=0))
    assert res.prior_incl_odds == pytest.approx(1.0)
    assert res.bf_inclusion == pytest.approx(9.0)

    flat = posterior_model_probs(evidences([0.0] * 8, specs))
    mean = inclusion_bf(flat, InclusionTarget(component=Component.MEAN, covariate=0))
    assert mean.bf_inclusion == pytest.approx(1.0)


def test_inclusion_bf_needs_a_split():
    specs = [s for s in one_covariate_specs() if s.mean_mask[0]]
    ev = posterior_model_probs(evidences([0.0] * 4, specs))
    with pytest.raises(PartitionError):
        inclusion_bf(ev, InclusionTarget(component=Component.MEAN, covariate=0))
    # the table skips the unsplit target
    table = inclusion_table(ev, CovariateSchema(names=("group",)))
    assert [r.target.component for r in table] == [Component.STRUCTURAL, Component.RESIDUAL]


def test_evidence_labels():
    label = evidence_label(7.25)
    assert label.strength == EvidenceStrength.MODERATE
    assert label.direction == EvidenceDirection.PRESENCE
    assert label.describe("a gender effect") == "moderate evidence for presence of a gender effect"

    against = evidence_label(1 / 3.52)
    assert against.strength == EvidenceStrength.MODERATE
    assert against.direction == EvidenceDirection.ABSENCE

    assert evidence_label(1.0).describe("anything") == "no evidence"
    assert evidence_label(2.0).strength == EvidenceStrength.WEAK
    assert evidence_label(50.0).strength == EvidenceStrength.STRONG
    assert evidence_label(1e4).strength == EvidenceStrength.VERY_STRONG
    with pytest.raises(ValueError):
        evidence_label(0.0)


def reshuffled(draws, seed):
    order = np.random.default_rng(seed).permutation(draws.n_draws)
    return draws.model_copy(update={
        "draws": draws.draws[order],
        "unconstrained": draws.unconstrained[order],
        "log_density": draws.log_density[order],
    })


def test_bridge_does_not_depend_on_which_draws_fit_the_proposal():
    table, draws = conjugate_draws(seed=13)
    exact = conjugate_logml(table, *SCALES)
    estimates = [
        bridge_logml(reshuffled(draws, s), table, ModelSpec(), PriorConfig(),
                     settings=fast_settings(), rng=np.random.default_rng(100 + s))
        for s in (1, 2)
    ]
    a, b = estimates
    assert abs(a.log_marglik - b.log_marglik) <= 3 * math.hypot(a.mcse, b.mcse)
    for est in estimates:
        assert est.log_marglik == pytest.approx(exact, abs=0.05)
