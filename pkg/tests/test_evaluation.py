import numpy as np
import pytest

import evaluation
from conftest import random_ball, unit
from errors import EmptyGroupError, ValidationError
from evaluation import AccuracyReport, generalization_gap, mc_accuracy, report
from harness import GAP_PARAMS, GAP_STEP_SIZE
from objectives import TrainConfig, TrainMethod, train_enp_pipeline
from oracle import TheoremMethod, bayes_predictor, per_context_accuracy, theorem_entry
from predictors import LinearPredictor, MaskPolicy
from synthdata import Context, make_params


def _invariant(params):
    return LinearPredictor(np.concatenate([unit(params.mu_vec), np.zeros(2 * params.d)]))


def test_constant_classifier_is_chance(params):
    accuracy, stderr = mc_accuracy(LinearPredictor(np.zeros(60)), params, Context.C1, 20_000, seed=0)
    assert abs(accuracy - 0.5) < 4 * stderr


def test_invariant_predictor_matches_closed_form(params):
    accuracy, stderr = mc_accuracy(_invariant(params), params, Context.C2, 200_000, seed=1)
    assert stderr == pytest.approx(0.0008, abs=2e-4)
    assert abs(accuracy - 0.841345) < 4 * stderr


def test_bayes_c1_on_minority_context(params):
    model = bayes_predictor(Context.C1, params)
    accuracy, stderr = mc_accuracy(model, params, Context.C2, 100_000, seed=2)
    assert abs(accuracy - per_context_accuracy(model, params, Context.C2)) < 3 * stderr


def test_random_linear_models_agree_with_oracle(params, rng):
    for _ in range(5):
        model = LinearPredictor(random_ball(rng, 3 * params.d, radius=1.0))
        for context in Context:
            accuracy, stderr = mc_accuracy(model, params, context, 100_000, seed=3)
            assert abs(accuracy - per_context_accuracy(model, params, context)) < 4 * stderr + 1e-12


def test_mc_accuracy_is_reproducible_and_shard_free(params, monkeypatch):
    model = bayes_predictor(Context.C2, params)
    first = mc_accuracy(model, params, Context.C1, 12_345, seed=4)
    assert mc_accuracy(model, params, Context.C1, 12_345, seed=4) == first
    monkeypatch.setattr(evaluation, "SHARD_SIZE", 1000)
    assert mc_accuracy(model, params, Context.C1, 12_345, seed=4) == first


def test_stderr_halves_with_four_times_samples(params):
    model = _invariant(params)
    _, small = mc_accuracy(model, params, Context.C1, 25_000, seed=5)
    _, large = mc_accuracy(model, params, Context.C1, 100_000, seed=5)
    assert small / large == pytest.approx(2.0, rel=0.2)


def test_mc_accuracy_needs_samples(params):
    with pytest.raises(ValidationError):
        mc_accuracy(_invariant(params), params, Context.C1, 0, seed=0)


def test_report_summaries():
    summary = AccuracyReport.from_accuracies(0.9, 0.7, 100)
    assert summary.balanced == pytest.approx(0.8)
    assert summary.worst == 0.7


def test_report_fields(params):
    result = report(_invariant(params), params, 50_000, seed=6)
    assert result.worst == min(result.acc_c1, result.acc_c2)
    assert result.balanced == (result.acc_c1 + result.acc_c2) / 2
    assert result.n_eval == 50_000
    # x1 has the same distribution in both contexts
    assert abs(result.acc_c1 - result.acc_c2) < 3 * (result.stderr_c1 + result.stderr_c2)


def test_pipeline_end_to_end_and_oracle_routing(params):
    pipeline = train_enp_pipeline(params)
    routed = report(pipeline, params, 50_000, seed=7)
    oracle = report(pipeline, params, 50_000, seed=7, oracle_router=True)
    # the router errs on roughly 0.04% of inputs
    assert abs(routed.acc_c1 - oracle.acc_c1) < 0.005
    assert abs(routed.acc_c2 - oracle.acc_c2) < 0.005
    # zero-masked minority accuracy clears the router-inclusive lower bound
    assert routed.acc_c2 > 0.5126
    assert routed.balanced > 0.88


def test_gap_arguments(params):
    with pytest.raises(ValidationError):
        generalization_gap(TrainMethod.ERM, params, 100)
    with pytest.raises(ValidationError):
        generalization_gap(TrainMethod.ICC, params, 5)
    with pytest.raises(EmptyGroupError):
        generalization_gap(TrainMethod.ICC, params.replace(p_c=1.0), 50)


@pytest.mark.parametrize("method", [TrainMethod.ICC, TrainMethod.ENP])
def test_gap_report(params, method):
    gap = generalization_gap(method, params, 200, fraction=1.0, seed=3)
    assert gap.method == method.value
    assert gap.context == "C2"
    assert gap.gap == gap.test_loss - gap.train_loss
    assert gap.train_loss > 0 and gap.test_loss > 0
    assert gap.n == 200 and gap.p_c == params.p_c


def test_unmasked_target_with_oracle_routing(params):
    pipeline = train_enp_pipeline(params)
    raw = pipeline.with_policy(MaskPolicy.NO_MASK_AT_EVAL)
    result = report(raw, params, 100_000, seed=1, oracle_router=True)
    exact = [per_context_accuracy(pipeline.target, params, c) for c in Context]
    assert abs(result.acc_c1 - exact[0]) < 4 * result.stderr_c1
    assert abs(result.acc_c2 - exact[1]) < 4 * result.stderr_c2
    # the exp-loss target trails the closed-form unmasked accuracies on both contexts
    stated = theorem_entry(params, TheoremMethod.ENP_THEOREM_EVAL)
    assert stated.acc_c1 - 0.02 < exact[0] < stated.acc_c1
    assert exact[1] < stated.acc_c2 - 0.03


def test_end_to_end_pipeline_against_lower_bound(params):
    pipeline = train_enp_pipeline(params)
    result = report(pipeline, params, 100_000, seed=2)
    bound = theorem_entry(params, TheoremMethod.ENP_LOWER_BOUND)
    assert result.acc_c2 >= bound.acc_c2
    # c1 stays within the exp-loss shortfall of the Bayes-target bound
    assert bound.acc_c1 - 0.015 < result.acc_c1 < bound.acc_c1


@pytest.mark.slow
def test_random_models_and_parameters_agree_with_oracle():
    draws = np.random.default_rng(77)
    for _ in range(5):
        sampled = make_params(d=int(draws.integers(1, 8)), mu_norm=draws.uniform(0.5, 2.0),
                              sigma=draws.uniform(0.5, 2.0), gamma=draws.uniform(0.05, 0.9),
                              eta=draws.uniform(0.1, 1.0), p_c=draws.uniform(0.5, 0.95))
        for _ in range(20):
            model = LinearPredictor(random_ball(draws, 3 * sampled.d, radius=1.0))
            for context in Context:
                accuracy, _ = mc_accuracy(model, sampled, context, 1_000_000, seed=int(draws.integers(1 << 31)))
                assert abs(accuracy - per_context_accuracy(model, sampled, context)) < 0.003


@pytest.mark.slow
@pytest.mark.parametrize("method", [TrainMethod.ICC, TrainMethod.ENP])
def test_gap_vanishes_for_large_samples(method):
    gap = generalization_gap(method, make_params(**GAP_PARAMS), 100_000, seed=4,
                             config=TrainConfig(step_size=GAP_STEP_SIZE))
    assert abs(gap.gap) < 0.02
