import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from itevalid.data import TrialDataset
from itevalid.glm import (
    DesignSpec,
    RankDeficientError,
    SeparationWarning,
    build_ite_design,
    fit_control_model,
    fit_ite_model,
    fit_logistic,
    predict_potential_risks,
)
from itevalid.simulation import DGM1, generate_population


def newton_oracle(X, y, offset=None, iters=100):
    """Plain Newton-Raphson on the binomial log-likelihood, no step control."""
    off = np.zeros(len(y)) if offset is None else offset
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        mu = expit(X @ b + off)
        grad = X.T @ (y - mu)
        hess = (X * (mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.solve(hess, grad)
        b = b + step
        if np.max(np.abs(step)) < 1e-14:
            break
    return b


def test_intercept_only_half():
    fit = fit_logistic(np.ones((10, 1)), np.array([0, 1] * 5))
    assert abs(fit.coefficients[0]) < 1e-8
    assert fit.converged


def test_offset_absorbs_signal():
    rng = np.random.default_rng(3)
    n = 100_000
    eta = rng.normal(-0.5, 1.2, n)
    y = (rng.random(n) < expit(eta)).astype(float)
    fit = fit_logistic(np.ones((n, 1)), y, offset=eta)
    assert abs(fit.coefficients[0]) < 0.05


def test_matches_independent_newton_solver():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(20), rng.standard_normal((20, 2))])
    y = (rng.random(20) < expit(X @ [0.2, 0.5, -0.4])).astype(float)
    fit = fit_logistic(X, y)
    assert np.max(np.abs(fit.coefficients - newton_oracle(X, y))) <= 1e-6


def test_matches_direct_likelihood_maximisation_with_offset_and_weights():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(60), rng.standard_normal((60, 2))])
    y = rng.random(60)  # fractional responses
    off = rng.normal(0, 0.5, 60)
    w = rng.uniform(0.5, 2, 60)

    def nll(b):
        eta = X @ b + off
        return -np.sum(w * (y * eta - np.logaddexp(0, eta)))

    def grad(b):
        return -X.T @ (w * (y - expit(X @ b + off)))

    ref = minimize(nll, np.zeros(3), jac=grad, method="BFGS", options={"gtol": 1e-12}).x
    fit = fit_logistic(X, y, offset=off, weights=w)
    assert np.max(np.abs(fit.coefficients - ref)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_offset_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    n = 200
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    off = rng.normal(0, 0.5, n)
    y = (rng.random(n) < expit(X @ [-0.3, 0.8, 0.2] + off)).astype(float)
    a = fit_logistic(X, y, offset=off)
    b = fit_logistic(X, y, offset=off + c)
    assert abs((b.coefficients[0] - a.coefficients[0]) + c) <= 1e-6
    assert np.max(np.abs(b.coefficients[1:] - a.coefficients[1:])) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_score_equations_hold_at_convergence(seed):
    rng = np.random.default_rng(seed)
    n = 300
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 3))])
    off = rng.normal(0, 0.3, n)
    w = rng.uniform(0.2, 3, n)
    y = (rng.random(n) < expit(X @ [0.1, 1.0, -0.5, 0.3] + off)).astype(float)
    fit = fit_logistic(X, y, offset=off, weights=w)
    assert fit.converged
    score = X.T @ (w * (y - expit(X @ fit.coefficients + off)))
    assert np.max(np.abs(score)) <= 1e-6


def test_fractional_self_consistency():
    rng = np.random.default_rng(6)
    X = np.column_stack([np.ones(400), rng.standard_normal((400, 2))])
    y = (rng.random(400) < expit(X @ [0.4, -1.0, 0.6])).astype(float)
    fit = fit_logistic(X, y)
    refit = fit_logistic(X, expit(X @ fit.coefficients))
    assert np.max(np.abs(refit.coefficients - fit.coefficients)) <= 1e-6


def test_rank_deficiency_names_column():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficientError, match="'x2'"):
        fit_logistic(X, np.array([0, 1] * 5), column_names=["intercept", "x1", "x2"])


def test_separation_flagged_not_fatal():
    x = np.linspace(-1, 1, 20)
    y = (x > 0).astype(float)
    with pytest.warns(SeparationWarning):
        fit = fit_logistic(np.column_stack([np.ones(20), x]), y)
    assert fit.separation
    assert np.all(np.isfinite(fit.coefficients))


def test_design_columns():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    D = build_ite_design(X, [1, 0])
    assert D[0].tolist() == [1, 1, 1, 2, 1, 2]
    assert D[1].tolist() == [1, 0, 3, 4, 0, 0]
    spec = DesignSpec(2)
    assert spec.terms == ["intercept", "treatment", "x1", "x2", "treatment:x1", "treatment:x2"]
    assert spec.control_arm().terms == ["intercept", "x1", "x2"]


def _fit_with(coef, p=2):
    from itevalid.glm import LogisticFit

    spec = DesignSpec(p)
    return LogisticFit(np.asarray(coef, dtype=float), True, 0.0, 0, spec=spec, terms=tuple(spec.terms))


def test_predictions_closed_form():
    preds = predict_potential_risks(_fit_with(DGM1.beta), np.zeros((1, 2)))
    assert preds.g0[0] == pytest.approx(expit(-1.0), abs=1e-12)
    assert preds.g1[0] == pytest.approx(expit(-1.75), abs=1e-12)
    assert round(preds.g0[0], 4) == 0.2689 and round(preds.g1[0], 4) == 0.1480
    zero = predict_potential_risks(_fit_with(np.zeros(6)), np.ones((3, 2)))
    assert np.all(zero.g0 == 0.5) and np.all(zero.g1 == 0.5) and np.all(zero.delta == 0)
    with pytest.raises(ValueError):
        predict_potential_risks(_fit_with(np.zeros(6)), np.ones((3, 3)))


def test_control_refit_is_plain_prognostic_model():
    pop = generate_population(DGM1, 7, 2000)
    d = pop.trial()
    fit = fit_control_model(d)
    assert fit.terms == ("intercept", "x1", "x2")
    c = d.controls
    direct = fit_logistic(np.column_stack([np.ones(c.size), d.X[c]]), d.y[c])
    assert np.allclose(fit.coefficients, direct.coefficients, atol=1e-12)
    preds = predict_potential_risks(fit, d.X)
    assert np.array_equal(preds.g0, preds.g1)


def test_recovers_dgm1_coefficients():
    pop = generate_population(DGM1, 8)
    fit = fit_ite_model(pop.trial())
    assert np.max(np.abs(fit.coefficients - np.array(DGM1.beta))) < 0.05


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        build_ite_design(np.zeros((3, 2)), [0, 1])
