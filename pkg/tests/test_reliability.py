import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import halfnorm, norm

from estimation.data import get_scenario, scenario_table, true_parameters
from shared.errors import DomainError, LinkRangeError, PriorError, SchemaError
from shared.models import (
    Component,
    CovariateProfile,
    CovariateSchema,
    ModelSpec,
    ParameterVector,
    PriorConfig,
    theta_layout,
)
from shared.reliability import (
    effect_code,
    enumerate_models,
    irr,
    irr_array,
    irr_profile,
    linked_mean,
    linked_sd,
    log_prior,
    parameter_names,
    profiles_for,
)
from shared.streams import derive_seed, inverse_cdf_normal, open_uniform, substream

PLUS = CovariateProfile(values=(0.5,))
MINUS = CovariateProfile(values=(-0.5,))


def test_model_space_sizes_and_order():
    one = enumerate_models(CovariateSchema(names=("group",)))
    assert len(one) == 8
    assert one[0] == ModelSpec.null(1)
    assert one[-1] == ModelSpec.full(1)
    # residual varies fastest, mean slowest
    assert one[1].residual_mask == (True,) and not any(one[1].structural_mask + one[1].mean_mask)
    assert one[2].structural_mask == (True,) and one[2].residual_mask == (False,)
    assert one[4].mean_mask == (True,)

    assert enumerate_models(CovariateSchema()) == [ModelSpec()]
    assert len(enumerate_models(CovariateSchema(names=("a", "b")))) == 64


def test_residual_difference_models_are_the_even_ones():
    specs = enumerate_models(CovariateSchema(names=("group",)))
    with_residual = [i + 1 for i, s in enumerate(specs) if s.residual_mask[0]]
    assert with_residual == [2, 4, 6, 8]


def test_profiles_and_effect_coding():
    profiles = profiles_for(CovariateSchema(names=("a", "b")))
    assert [p.values for p in profiles] == [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]
    assert effect_code(["male", "female", "male"]) == {"female": -0.5, "male": 0.5}
    with pytest.raises(SchemaError):
        effect_code(["only"])
    with pytest.raises(ValidationError):
        CovariateProfile(values=(1.0,))


def test_parameter_names_follow_layout():
    names = parameter_names(CovariateSchema(names=("gender",)))
    lay = theta_layout(1)
    assert len(names) == lay.size
    assert names[lay.alpha_gamma] == "alpha_gamma"
    assert names[lay.beta_epsilon.start] == "beta_epsilon[gender]"


def test_linked_sd_examples():
    assert linked_sd(0.74, (0.0,), PLUS) == pytest.approx(0.74)
    assert linked_sd(0.7412, (0.2021,), PLUS) == pytest.approx(0.8200, abs=5e-4)
    assert linked_sd(0.7412, (0.2021,), MINUS) == pytest.approx(0.6700, abs=5e-4)


def test_linked_sd_errors():
    with pytest.raises(DomainError):
        linked_sd(0.0, (0.1,), PLUS)
    with pytest.raises(LinkRangeError):
        linked_sd(1.0, (2000.0,), PLUS)


def test_linked_mean_examples():
    assert linked_mean(0.0, (0.4,), MINUS) == pytest.approx(-0.2)
    assert linked_mean(0.0, (0.0,), PLUS) == 0.0
    assert linked_mean(1.0, (0.4, -0.2), CovariateProfile(values=(0.5, 0.5))) == pytest.approx(1.1)


def test_irr_values():
    assert irr(0.67, 0.82) == pytest.approx(0.40, abs=5e-3)
    assert irr(0.73, 0.66) == pytest.approx(0.55, abs=5e-3)
    assert irr(1.3, 1.3) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        irr(0.0, 1.0)


def test_irr_profile_from_scenarios():
    flat = ParameterVector(alpha_mu=0.0, beta_mu=(0.0,), alpha_gamma=0.8, beta_gamma=(0.0,),
                           alpha_epsilon=0.8, beta_epsilon=(0.0,))
    assert irr_profile(flat, PLUS) == pytest.approx(0.5)

    s2 = true_parameters(get_scenario("2"))
    assert irr_profile(s2, PLUS) == pytest.approx(0.4004, abs=5e-4)
    s82 = true_parameters(get_scenario("8.2"))
    assert irr_profile(s82, MINUS) == pytest.approx(0.55, abs=5e-3)


def test_irr_array_matches_scalar():
    s = true_parameters(get_scenario("4.1"))
    arr = irr_array(s.to_array(), np.array([[-0.5], [0.5]]), 1)
    assert arr == pytest.approx([irr_profile(s, MINUS), irr_profile(s, PLUS)])


def test_log_prior_at_modes():
    prior = PriorConfig()
    params = ParameterVector(alpha_mu=0.0, alpha_gamma=1e-12, alpha_epsilon=1e-12)
    expected = 2 * math.log(2 * norm.pdf(0.0)) + math.log(norm.pdf(0.0))
    assert log_prior(params, prior, ModelSpec()) == pytest.approx(expected, abs=1e-9)


def test_log_prior_quadratic_in_alpha_mu():
    prior = PriorConfig()
    a = ParameterVector(alpha_mu=0.0, alpha_gamma=0.5, alpha_epsilon=0.5)
    b = ParameterVector(alpha_mu=1.0, alpha_gamma=0.5, alpha_epsilon=0.5)
    assert log_prior(b, prior, ModelSpec()) - log_prior(a, prior, ModelSpec()) == pytest.approx(-0.5, abs=1e-12)


def test_log_prior_full_model_matches_density_product():
    prior = PriorConfig.preset("medium")
    params = ParameterVector(alpha_mu=0.0, beta_mu=(0.1,), alpha_gamma=0.7, beta_gamma=(-0.2,),
                             alpha_epsilon=0.9, beta_epsilon=(0.3,))
    expected = (
        norm.logpdf(0.0, 0, 1)
        + halfnorm.logpdf(0.7, scale=1) + halfnorm.logpdf(0.9, scale=1)
        + norm.logpdf(0.1, 0, 0.5) + norm.logpdf(-0.2, 0, 0.5) + norm.logpdf(0.3, 0, 0.5)
    )
    assert log_prior(params, prior, ModelSpec.full(1)) == pytest.approx(expected, abs=1e-10)


def test_log_prior_rejects_masked_coefficients():
    params = ParameterVector(alpha_mu=0.0, beta_mu=(0.1,), alpha_gamma=0.7, beta_gamma=(0.0,),
                             alpha_epsilon=0.9, beta_epsilon=(0.0,))
    with pytest.raises(ValueError):
        log_prior(params, PriorConfig(), ModelSpec.null(1))


def test_model_spec_helpers():
    schema = CovariateSchema(names=("gender", "stage"))
    spec = ModelSpec.null(2).with_effect(Component.RESIDUAL, 0, True).with_effect(Component.RESIDUAL, 1, True)
    assert spec.describe(schema) == {"mean": "None", "structural": "None", "residual": "gender & stage"}
    assert spec.n_parameters == 5
    assert ModelSpec.full(2).contains(spec)
    assert not spec.contains(ModelSpec.full(2))


def test_prior_presets():
    assert PriorConfig.preset("small").sigma_beta == 0.25
    assert PriorConfig.preset("Large").label == "large"
    assert PriorConfig.preset("0.7").sigma_beta == pytest.approx(0.7)
    with pytest.raises(ValueError):
        PriorConfig.preset("huge")


def test_scenario_table_constraints():
    rows = {s.name: s for s in scenario_table()}
    assert len(rows) == 10
    r2 = rows["2"]
    assert (r2.mu1, r2.mu2, r2.sg1, r2.sg2, r2.se1, r2.se2) == (0.0, 0.0, 0.67, 0.67, 0.67, 0.82)
    r82 = rows["8.2"]
    assert (r82.mu1, r82.mu2, r82.sg1, r82.sg2, r82.se1, r82.se2) == (-0.2, 0.2, 0.73, 0.60, 0.66, 0.81)
    for s in rows.values():
        total = (s.sg1 ** 2 + s.se1 ** 2 + s.sg2 ** 2 + s.se2 ** 2) / 2
        assert total == pytest.approx(1.0, abs=0.015)
        assert sum(s.irrs()) / 2 == pytest.approx(0.45, abs=0.015)


def test_streams_are_reproducible_and_distinct():
    a = substream(5, 1, 2).standard_normal(4)
    b = substream(5, 1, 2).standard_normal(4)
    c = substream(5, 2, 1).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert derive_seed(5, 0) != derive_seed(5, 1)
    assert derive_seed(5, 3) == derive_seed(5, 3)


def test_open_uniform_and_normal_inversion():
    u = open_uniform(substream(1), 10_000)
    assert np.all((u > 0) & (u < 1))
    z = inverse_cdf_normal(substream(1), 10_000)
    assert np.all(np.isfinite(z))
    assert abs(z.mean()) < 0.05


def test_unusable_prior_presets():
    for value in ("huge", "", "0", "-1", "nan", "inf"):
        with pytest.raises(PriorError):
            PriorConfig.preset(value)
    with pytest.raises(PriorError):
        PriorConfig.preset(-0.5)


def test_sd_intercept_is_geometric_mean_of_opposite_profiles():
    rng = np.random.default_rng(3)
    for _ in range(50):
        alpha = float(rng.uniform(0.05, 3.0))
        beta = tuple(rng.normal(0.0, 1.0, 2))
        for values in ((0.5, 0.5), (0.5, -0.5)):
            p = CovariateProfile(values=values)
            mirror = p.flipped()
            assert math.sqrt(linked_sd(alpha, beta, p) * linked_sd(alpha, beta, mirror)) == pytest.approx(alpha, rel=1e-12)


def test_irr_is_monotone_in_each_sd():
    grid = np.linspace(0.05, 3.0, 25)
    for se in (0.1, 0.74, 2.0):
        values = [irr(sg, se) for sg in grid]
        assert all(a < b for a, b in zip(values, values[1:]))
    for sg in (0.1, 0.67, 2.0):
        values = [irr(sg, se) for se in grid]
        assert all(a > b for a, b in zip(values, values[1:]))


def test_label_swap_leaves_profile_quantities_unchanged():
    rng = np.random.default_rng(8)
    for _ in range(30):
        b_mu, b_g, b_e = (tuple(rng.normal(0.0, 0.8, 2)) for _ in range(3))
        p = ParameterVector(alpha_mu=float(rng.normal()), beta_mu=b_mu,
                            alpha_gamma=float(rng.uniform(0.2, 2.0)), beta_gamma=b_g,
                            alpha_epsilon=float(rng.uniform(0.2, 2.0)), beta_epsilon=b_e)

        def negate(beta):
            return (-beta[0], beta[1])

        q = p.model_copy(update=dict(beta_mu=negate(b_mu), beta_gamma=negate(b_g), beta_epsilon=negate(b_e)))
        for values in ((0.5, 0.5), (-0.5, 0.5), (0.5, -0.5), (-0.5, -0.5)):
            prof = CovariateProfile(values=values)
            swapped = prof.flipped(0)
            assert linked_mean(q.alpha_mu, q.beta_mu, swapped) == pytest.approx(linked_mean(p.alpha_mu, p.beta_mu, prof))
            assert linked_sd(q.alpha_gamma, q.beta_gamma, swapped) == pytest.approx(linked_sd(p.alpha_gamma, p.beta_gamma, prof))
            assert linked_sd(q.alpha_epsilon, q.beta_epsilon, swapped) == pytest.approx(
                linked_sd(p.alpha_epsilon, p.beta_epsilon, prof))
            assert irr_profile(q, swapped) == pytest.approx(irr_profile(p, prof))


def test_log_prior_decreases_without_bound():
    spec = ModelSpec.full(1)
    prior = PriorConfig()
    base = ParameterVector(alpha_mu=0.0, beta_mu=(0.0,), alpha_gamma=1.0, beta_gamma=(0.0,),
                           alpha_epsilon=1.0, beta_epsilon=(0.0,))
    for field in ("beta_mu", "beta_gamma", "beta_epsilon"):
        values = [log_prior(base.model_copy(update={field: (b,)}), prior, spec)
                  for b in (0.0, 1.0, 10.0, 100.0, 1000.0)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < -1e6
    for field in ("alpha_gamma", "alpha_epsilon"):
        values = [log_prior(base.model_copy(update={field: a}), prior, spec) for a in (1.0, 10.0, 1e3)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < -1e5
