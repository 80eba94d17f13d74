import math

import numpy as np
import pytest
from pydantic import ValidationError

import simulation.harness as harness
from estimation.analysis import SpaceAnalysis
from estimation.models import FrequentistFit, ModelFit, WeightMethod, WeightVector
from shared.models import CovariateSchema, ModelSpec, ParameterVector
from shared.reliability import enumerate_models, irr
from simulation.harness import default_plan, full_plan, run_study
from simulation.metrics import (
    bf_calibration,
    classify,
    compute_metrics,
    metrics_frame,
    rmse_stats,
    rmse_table,
    selection_metrics,
    write_study,
)
from simulation.models import condition_label
from tests.test_helpers import CONDITION, fast_settings, one_covariate_specs, record, tiny_plan, truth_estimates


def test_classification_is_exhaustive():
    specs = one_covariate_specs()
    for truth in specs:
        classes = [classify(s, truth) for s in specs]
        assert classes.count("correct") == 1
        assert set(classes) <= {"correct", "more_complex", "other"}
    assert [classify(s, ModelSpec.null(1)) for s in specs].count("more_complex") == 7
    assert [classify(s, ModelSpec.full(1)) for s in specs].count("other") == 7

    two = enumerate_models(CovariateSchema(names=("a", "b")))
    truth = two[10]
    assert sum(classify(s, truth) == "correct" for s in two) == 1


def test_rmse_stats():
    assert rmse_stats(np.zeros(10)) == (0.0, 0.0, 0.0)
    rmse, se, ratio = rmse_stats(np.full(10, 0.1))
    assert rmse == pytest.approx(0.1)
    assert se == pytest.approx(0.0, abs=1e-12)
    assert ratio == pytest.approx(1.0)
    rmse, _, ratio = rmse_stats(np.array([0.1, -0.1]))
    assert rmse == pytest.approx(0.1)
    assert ratio == pytest.approx(0.0)


def test_rmse_table_pools_both_groups():
    records = [record(r, estimates={"bma": truth_estimates(0.1), "full": truth_estimates()}) for r in range(4)]
    rows = {(r.method, r.metric): r for r in rmse_table(records, "structural_sd", ["bma", "full"])}
    assert rows[("bma", "rmse_structural_sd")].value == pytest.approx(0.1)
    assert rows[("bma", "rmse_structural_sd")].n == 8
    assert rows[("full", "rmse_structural_sd")].value == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        rmse_table(records, "variance", ["bma"])


def test_selection_rates_sum_to_one():
    specs = one_covariate_specs()
    picks = [specs[0], specs[0], specs[1], specs[7]]
    records = [record(r, selected={"bf": s}) for r, s in enumerate(picks)]
    rows = {r.metric: r for r in selection_metrics(records, ["bf"])}
    assert rows["selection_accuracy"].value == pytest.approx(0.5)
    assert rows["more_complex_rate"].value == pytest.approx(0.5)
    assert rows["other_rate"].value == 0.0
    assert sum(r.value for r in rows.values()) == pytest.approx(1.0)
    assert rows["selection_accuracy"].se == pytest.approx(math.sqrt(0.25 / 4))


def test_uninformative_bayes_factors_never_favor_the_truth():
    notes = []
    rows = bf_calibration([record(r) for r in range(5)], notes)
    assert len(rows) == 6
    assert all(r.value == 0.0 for r in rows)
    assert {r.metric for r in rows} >= {"bf_favor_truth_mean_no_difference", "bf_misleading_residual_no_difference"}
    # scenario 1 has no difference in any component
    assert len(notes) == 3


def test_misleading_evidence():
    rows = {r.metric: r.value for r in bf_calibration([record(0, bf=50.0), record(1, bf=0.5)])}
    assert rows["bf_favor_truth_structural_no_difference"] == pytest.approx(0.5)
    assert rows["bf_misleading_structural_no_difference"] == pytest.approx(0.5)


def test_failed_conditions_are_flagged():
    plan = tiny_plan(replications=10)
    records = [record(r) for r in range(9)] + [record(9, failure="RuntimeError: boom")]
    metrics = compute_metrics(records, plan)
    label = condition_label(CONDITION.key)
    assert metrics.failures == {label: 1}
    assert metrics.flagged == [label]

    ok = compute_metrics([record(r) for r in range(10)], plan)
    assert ok.flagged == []


def test_invalid_plans():
    with pytest.raises(ValidationError):
        tiny_plan(scenarios=["9"])
    with pytest.raises(ValidationError):
        tiny_plan(ratees_per_group=[30])
    with pytest.raises(ValidationError):
        tiny_plan(ratings_per_ratee=[4])
    with pytest.raises(ValidationError):
        tiny_plan(selection_methods=["magic"])
    with pytest.raises(ValidationError):
        tiny_plan(selection_methods=[], averaging_methods=[])


def test_plan_conditions_and_presets():
    plan = default_plan(replications=3)
    assert [c.key for c in plan.conditions()] == [("1", 50, 3), ("1", 200, 3), ("4.2", 50, 3), ("4.2", 200, 3)]
    assert plan.methods[:7] == ["bf", "aic", "bic", "waic", "loo", "forward", "backward"]
    full = full_plan()
    assert len(full.conditions()) == 80
    assert full.replications == 1000


def test_simulation_failure_becomes_a_record(monkeypatch):
    def broken(config):
        raise RuntimeError("simulator down")

    monkeypatch.setattr(harness, "simulate_dataset", broken)
    result = run_study(tiny_plan(replications=2), fast_settings())
    assert len(result.records) == 2
    assert all(not r.ok and "simulator down" in r.failure for r in result.records)
    assert result.metrics.flagged == [condition_label(CONDITION.key)]


def test_tiny_study_is_deterministic(tmp_path):
    settings = fast_settings()
    a = run_study(tiny_plan(), settings)
    b = run_study(tiny_plan(), settings)
    (rec,) = a.records
    assert rec.ok, rec.failure
    assert set(rec.selected) == {"bf", "aic"}
    assert set(rec.estimates) == {"bf", "aic", "bma", "full"}
    assert set(rec.inclusion_bf) == {"mean", "structural", "residual"}
    assert a.records == b.records

    frame = metrics_frame(a.metrics)
    assert set(frame["scenario"]) == {"1", "all"}
    accuracy = frame[(frame["metric"] == "selection_accuracy") & (frame["scenario"] == "1")]
    assert set(accuracy["method"]) == {"bf", "aic"}

    paths = write_study(a, tmp_path)
    assert [p.name for p in paths] == ["metrics.csv", "summary.json"]
    assert all(p.exists() for p in paths)


def test_standard_errors_shrink_when_replications_double():
    rng = np.random.default_rng(2)
    specs = one_covariate_specs()
    shifts = rng.normal(0.0, 0.1, 200)
    picks = rng.integers(0, len(specs), 200)
    once = [record(r, selected={"bf": specs[p]}, estimates={"bma": truth_estimates(s)})
            for r, (s, p) in enumerate(zip(shifts, picks))]
    twice = once + [rec.model_copy(update={"replication": rec.replication + 200}) for rec in once]

    def standard_errors(records):
        rows = rmse_table(records, "irr", ["bma"]) + selection_metrics(records, ["bf"])
        return {r.metric: r.se for r in rows if r.se}

    small, large = standard_errors(once), standard_errors(twice)
    assert set(small) == set(large) and small
    for metric, se in small.items():
        assert se / large[metric] == pytest.approx(math.sqrt(2), rel=0.05)


def test_weighted_group_estimates_average_per_model_values():
    specs = one_covariate_specs()

    def reml(spec, sg):
        params = ParameterVector(alpha_mu=0.0, beta_mu=(0.0,), alpha_gamma=sg, beta_gamma=(0.0,),
                                 alpha_epsilon=0.7, beta_epsilon=(0.0,))
        return FrequentistFit(spec=spec, method="reml", estimates=params, log_likelihood=-50.0, n_ratings=150)

    fits = [ModelFit(spec=specs[0], reml=reml(specs[0], 0.5)),
            ModelFit(spec=specs[1], reml=reml(specs[1], 0.9)),
            ModelFit(spec=specs[2])]
    weights = WeightVector(method=WeightMethod.AIC, weights=(0.2, 0.8, 0.0))
    analysis = SpaceAnalysis(specs=specs[:3], evidences=[], weights={"aic_weights": weights})
    out = harness.group_estimates(fits, analysis, ["aic_weights"])["aic_weights"]
    assert out.sg1 == pytest.approx(0.2 * 0.5 + 0.8 * 0.9)
    assert out.irr1 == pytest.approx(0.2 * irr(0.5, 0.7) + 0.8 * irr(0.9, 0.7))
    assert out.se2 == pytest.approx(0.7)

    # a weighted model without estimates leaves the method out
    missing = SpaceAnalysis(specs=specs[:3], evidences=[],
                            weights={"aic_weights": WeightVector(method=WeightMethod.AIC, weights=(0.5, 0.0, 0.5))})
    assert harness.group_estimates(fits, missing, ["aic_weights"]) == {}
