"""Score functions, analytic Jacobians, and the weighted IRLS fitter."""

import numpy as np
import pytest

from conftest import dataset_from
from elsurvey.errors import ConvergenceError, DataError
from elsurvey.glm import FAMILIES, ModelSpec, design_matrix, irls_fit, score, score_jacobian
from oracles import gamma_glm_se


def _single_obs(y):
    return dataset_from({"y": [y]}, response="y")


# ---------------------------------------------------------------------------
# score


def test_logit_score_at_zero_theta():
    model = ModelSpec("bernoulli-logit", terms=())
    np.testing.assert_allclose(score(model, [0.0], _single_obs(1.0)), [[0.5]], atol=1e-15)
    np.testing.assert_allclose(score(model, [0.0], _single_obs(0.0)), [[-0.5]], atol=1e-15)


def test_gaussian_score_vanishes_at_least_squares_fit(rng):
    n = 40
    x = rng.normal(size=n)
    y = 1.0 + 2.0 * x + rng.normal(size=n)
    data = dataset_from({"y": y, "x": x}, response="y")
    model = ModelSpec("gaussian-identity", terms=("x",))
    theta = np.linalg.lstsq(design_matrix(model, data), y, rcond=None)[0]
    sums = score(model, theta, data).sum(axis=0)
    assert np.max(np.abs(sums)) < 1e-10


def test_score_dimension_mismatch_rejected():
    model = ModelSpec("bernoulli-logit", terms=())
    with pytest.raises(DataError, match="shape"):
        score(model, [0.0, 1.0], _single_obs(1.0))


def test_gamma_score_requires_positive_linear_predictor():
    model = ModelSpec("gamma-inverse", terms=())
    with pytest.raises(ConvergenceError, match="predictor"):
        score(model, [-1.0], _single_obs(2.0))


# ---------------------------------------------------------------------------
# score_jacobian


def test_logit_jacobian_single_observation():
    model = ModelSpec("bernoulli-logit", terms=())
    J = score_jacobian(model, [0.0], _single_obs(1.0), weights=np.array([1.0]))
    np.testing.assert_allclose(J, [[-0.25]], atol=1e-15)


def _random_instance(rng, family):
    n = int(rng.integers(5, 41))
    x = rng.uniform(-0.5, 0.5, size=n)
    if family == "bernoulli-logit":
        y = rng.integers(0, 2, size=n).astype(float)
        theta = rng.normal(scale=0.8, size=2)
    elif family == "gaussian-identity":
        y = rng.normal(size=n)
        theta = rng.normal(scale=0.8, size=2)
    else:  # gamma-inverse: keep the linear predictor positive
        y = rng.gamma(shape=2.0, scale=0.5, size=n) + 0.05
        theta = np.array([rng.uniform(0.8, 1.6), rng.uniform(-0.4, 0.4)])
    data = dataset_from({"y": y, "x": x}, response="y")
    w = rng.uniform(0.2, 1.0, size=n)
    w /= w.sum()
    return ModelSpec(family, terms=("x",)), theta, data, w


@pytest.mark.parametrize("family", FAMILIES)
def test_jacobian_matches_central_finite_differences(family, rng):
    step = 1e-5
    for _ in range(50):
        model, theta, data, w = _random_instance(rng, family)
        J = score_jacobian(model, theta, data, w)
        fd = np.empty_like(J)
        for k in range(model.p):
            e = np.zeros(model.p)
            e[k] = step
            up = w @ score(model, theta + e, data)
            dn = w @ score(model, theta - e, data)
            fd[:, k] = (up - dn) / (2.0 * step)
        rel = np.linalg.norm(J - fd) / np.linalg.norm(J)
        assert rel < 1e-6


@pytest.mark.parametrize("family", ["bernoulli-logit", "gaussian-identity"])
def test_jacobian_symmetric(family, rng):
    model, theta, data, w = _random_instance(rng, family)
    J = score_jacobian(model, theta, data, w)
    assert np.max(np.abs(J - J.T)) < 1e-12


# ---------------------------------------------------------------------------
# irls_fit


def test_gamma_intercept_only_fits_reciprocal_mean():
    X = np.ones((3, 1))
    beta = irls_fit("gamma-inverse", [1.0, 2.0, 3.0], X)
    np.testing.assert_allclose(beta, [0.5], atol=1e-10)


def test_logit_intercept_only_fits_logit_of_mean():
    X = np.ones((4, 1))
    beta = irls_fit("bernoulli-logit", [1.0, 0.0, 0.0, 0.0], X)
    np.testing.assert_allclose(beta, [np.log(1.0 / 3.0)], atol=1e-10)


def test_gaussian_irls_equals_weighted_least_squares(rng):
    n = 25
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ np.array([0.3, -1.1]) + rng.normal(size=n)
    c = rng.uniform(0.5, 2.0, size=n)
    beta = irls_fit("gaussian-identity", y, X, case_weights=c)
    XtW = X.T * c
    expected = np.linalg.solve(XtW @ X, XtW @ y)
    np.testing.assert_allclose(beta, expected, atol=1e-12)


def test_gamma_recovery_within_three_standard_errors():
    rng = np.random.default_rng(7151)
    n, shape = 5000, 5.0
    beta0 = np.array([0.9, 0.4])
    X = np.column_stack([np.ones(n), rng.uniform(-0.5, 0.5, size=n)])
    mu = 1.0 / (X @ beta0)
    y = rng.gamma(shape=shape, scale=mu / shape)
    beta = irls_fit("gamma-inverse", y, X)
    se = gamma_glm_se(X, beta0, shape)
    assert np.all(np.abs(beta - beta0) <= 3.0 * se)


@pytest.mark.parametrize("family", FAMILIES)
def test_weighted_score_sum_vanishes_at_fit(family, rng):
    model, _, data, w = _random_instance(rng, family)
    while data.n < 10:  # keep the fit well-posed
        model, _, data, w = _random_instance(rng, family)
    X = design_matrix(model, data)
    beta = irls_fit(family, data.y, X, case_weights=w)
    sums = w @ score(model, beta, data)
    assert np.max(np.abs(sums)) < 1e-8


@pytest.mark.parametrize("family", FAMILIES)
def test_irls_invariant_to_row_order_and_weight_scale(family, rng):
    model, _, data, w = _random_instance(rng, family)
    while data.n < 10:
        model, _, data, w = _random_instance(rng, family)
    X = design_matrix(model, data)
    y = data.y
    beta = irls_fit(family, y, X, case_weights=w)
    perm = rng.permutation(data.n)
    beta_perm = irls_fit(family, y[perm], X[perm], case_weights=w[perm])
    beta_scaled = irls_fit(family, y, X, case_weights=37.0 * w)
    np.testing.assert_allclose(beta_perm, beta, atol=1e-9)
    np.testing.assert_allclose(beta_scaled, beta, atol=1e-9)


def test_irls_rank_deficiency_rejected():
    X = np.column_stack([np.ones(5), np.ones(5)])
    with pytest.raises(DataError, match="rank"):
        irls_fit("gaussian-identity", np.arange(5.0), X)


def test_logit_separation_raises():
    x = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
    y = (x > 0).astype(float)
    X = np.column_stack([np.ones(6), x])
    with pytest.raises(ConvergenceError):
        irls_fit("bernoulli-logit", y, X)
