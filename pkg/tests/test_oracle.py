import math

import numpy as np
import pytest
from scipy import special

from conftest import random_ball, unit
from errors import TheoryRangeWarning, ValidationError
from oracle import (TheoremMethod, bayes_predictor, bound_constant, corollary1_ratios, erfc,
                    generalization_bounds, input_norm_radius, lemma_accuracy, normal_cdf,
                    per_context_accuracy, pipeline_accuracy, subspace_residual, theorem1_table,
                    theorem_entry)
from synthdata import Context, canonical_mask, make_params


def _series_erfc(x, terms=30):
    total = sum((-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1)) for n in range(terms))
    return 1.0 - 2.0 / math.sqrt(math.pi) * total


def test_erfc_matches_series_near_zero():
    for x in np.linspace(-2.0, 2.0, 100):
        assert abs(erfc(x) - _series_erfc(x)) < 1e-12


def test_erfc_matches_scipy_over_all_branches():
    points = np.concatenate([np.linspace(-6.0, 6.0, 97), [0.84375, 1.25, 1 / 0.35, 10.0, 27.0, 30.0]])
    np.testing.assert_allclose(erfc(points), special.erfc(points), rtol=1e-13, atol=1e-300)


def test_erfc_identity_and_special_values():
    x = np.linspace(-8.0, 8.0, 101)
    np.testing.assert_allclose(erfc(x) + erfc(-x), 2.0, atol=1e-12)
    assert erfc(0.0) == 1.0
    assert erfc(math.inf) == 0.0
    assert erfc(-math.inf) == 2.0
    assert math.isnan(erfc(math.nan))


def test_normal_cdf():
    assert normal_cdf(1.0) == pytest.approx(0.841344746, abs=1e-9)
    assert normal_cdf(0.0) == 0.5


def test_invariant_predictor_accuracy(params):
    w = np.concatenate([unit(params.mu_vec), np.zeros(2 * params.d)])
    for context in Context:
        assert per_context_accuracy(w, params, context) == pytest.approx(0.841345, abs=1e-6)


def test_bayes_predictors(params):
    g = params.gamma
    c1 = per_context_accuracy(bayes_predictor(Context.C1, params), params, Context.C1)
    c2 = per_context_accuracy(bayes_predictor(Context.C2, params), params, Context.C2)
    assert c1 == pytest.approx(0.5 * erfc(-params.rho1 * math.sqrt(1 + 1 / g)), abs=1e-12)
    assert c1 == pytest.approx(0.999545, abs=1e-6)
    assert c2 == pytest.approx(0.85287, abs=1e-5)


def test_zero_predictor_ties_to_positive(params):
    assert per_context_accuracy(np.zeros(3 * params.d), params, Context.C1) == 0.5


def test_mask_equals_masked_weights(params, rng):
    w = random_ball(rng, 3 * params.d)
    mask = canonical_mask(Context.C2, params.d)
    assert per_context_accuracy(w, params, Context.C2, mask) == pytest.approx(
        per_context_accuracy(mask.as_array() * w, params, Context.C2))


def test_lemma_formula_agrees_with_general_accuracy(params, rng):
    d = params.d
    for _ in range(10):
        w = random_ball(rng, 3 * d)
        w[2 * d:] = 0.0
        for context in Context:
            assert lemma_accuracy(w[:d], w[d:2 * d], params, context) == pytest.approx(
                per_context_accuracy(w, params, context), abs=1e-12)


def test_theorem_table_at_p0(params):
    table = {row.method: row for row in theorem1_table(params)}
    assert table[TheoremMethod.IRM].acc_c1 == pytest.approx(0.841345, abs=1e-6)
    assert table[TheoremMethod.CONDRO].acc_c2 == pytest.approx(0.841345, abs=1e-6)
    assert table[TheoremMethod.ICC].acc_c1 == pytest.approx(0.999545, abs=1e-6)
    assert table[TheoremMethod.ICC].acc_c2 == pytest.approx(0.85287, abs=1e-5)
    assert table[TheoremMethod.ERM_PC_TO_1].acc_c2 == pytest.approx(0.38785, abs=1e-3)
    assert table[TheoremMethod.ENP_THEOREM_EVAL].acc_c2 == pytest.approx(
        0.5 * erfc(-params.rho1 / math.sqrt(1 + 1 / params.gamma ** 3)), abs=1e-12)
    router = 0.5 * erfc(-params.rho2)
    assert table[TheoremMethod.ENP_LOWER_BOUND].acc_c1 == pytest.approx(router * 0.999545, abs=1e-6)
    assert theorem_entry(params, "icc") == table[TheoremMethod.ICC]


def test_enp_lower_bound_small_eta():
    params = make_params(eta=0.1)
    row = theorem_entry(params, TheoremMethod.ENP_LOWER_BOUND)
    expected = 0.25 * erfc(-params.rho2) * erfc(-params.rho1 * math.sqrt(11))
    assert row.acc_c1 == pytest.approx(expected, abs=1e-12)
    assert row.acc_c1 == pytest.approx(0.999545, abs=1e-6)


def test_minority_majority_warning(params):
    with pytest.warns(TheoryRangeWarning):
        theorem1_table(params.replace(p_c=0.3))


def test_corollary_ratios_vanishing_router_noise(params):
    ratio_c1, ratio_c2 = corollary1_ratios(params.replace(eta=1e-6))
    assert abs(ratio_c1 - 1.0) < 1e-3
    limit = erfc(-params.rho1 / math.sqrt(1 + 1 / params.gamma ** 3)) / erfc(-params.rho1)
    assert ratio_c2 == pytest.approx(limit, abs=1e-6)
    assert ratio_c2 == pytest.approx(0.60927, abs=1e-4)


def test_bound_constant_example():
    params = make_params(d=1, mu_norm=1.0, sigma=1.0, gamma=1.0, eta=0.5)
    assert bound_constant(params, 0.05) == pytest.approx(5.38474, abs=1e-4)


def test_bound_ratio_is_minority_share(params):
    bounds = generalization_bounds(params.replace(p_c=0.75), 1000, 0.05)
    assert bounds.icc_bound / bounds.enp_bound == pytest.approx(2.0, rel=1e-12)
    assert bounds.lipschitz == pytest.approx(math.exp(input_norm_radius(params, 0.05)))
    assert bounds.icc_bound > bounds.enp_bound


@pytest.mark.parametrize("n, delta, p_c", [(100, 0.0, 0.9), (100, 1.0, 0.9), (0, 0.05, 0.9), (100, 0.05, 1.0)])
def test_bound_arguments_checked(params, n, delta, p_c):
    with pytest.raises(ValidationError):
        generalization_bounds(params.replace(p_c=p_c), n, delta)


def test_pipeline_accuracy():
    assert pipeline_accuracy(0.9, 1.0, 0.0) == pytest.approx(0.9)
    assert pipeline_accuracy(1.0, 0.7, 0.2) == pytest.approx(0.7)


def test_subspace_residual(params):
    u = unit(params.mu_vec)
    zero = np.zeros(params.d)
    assert subspace_residual(np.concatenate([u, u, zero]) / 2, params) == pytest.approx(0.0, abs=1e-12)
    assert subspace_residual(np.concatenate([zero, zero, u]), params) == pytest.approx(1.0)


@pytest.mark.parametrize("changes", [{}, dict(gamma=0.3, p_c=0.6), dict(d=3, sigma=0.7, eta=1.0)])
def test_bayes_dominates_random_predictors(params, rng, changes):
    sampled = params.replace(**changes)
    best = {c: per_context_accuracy(bayes_predictor(c, sampled), sampled, c) for c in Context}
    for _ in range(100):
        w = random_ball(rng, 3 * sampled.d, radius=1.0)
        for context in Context:
            assert per_context_accuracy(w, sampled, context) <= best[context] + 1e-12
