"""Maximum-likelihood logistic regression with offset and fractional responses.

Fitted by iteratively reweighted least squares (Newton-Raphson on the
binomial log-likelihood). Responses may be any value in [0, 1], which turns
the fit into a quasi-binomial one; that is what reference fits against known
event probabilities need.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, xlogy

from .data import RiskPredictionSet, TrialDataset

DEV_TOL = 1e-8
MAX_ITER = 25
SEPARATION_LP = 30.0


class RankDeficientError(ValueError):
    """Design matrix does not have full column rank."""


class SeparationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DesignSpec:
    """Ordered terms of the ITE logistic model.

    Terms are ``intercept, treatment, x1..xp, treatment:x1..treatment:xp``;
    with ``includes_treatment_terms=False`` only ``intercept, x1..xp`` remain
    (the prognostic model fitted in a control arm).
    """

    n_covariates: int
    includes_treatment_terms: bool = True
    covariate_names: Optional[tuple] = None

    @property
    def names(self) -> tuple:
        if self.covariate_names is not None:
            return tuple(self.covariate_names)
        return tuple(f"x{k + 1}" for k in range(self.n_covariates))

    @property
    def terms(self) -> list[str]:
        cov = list(self.names)
        if not self.includes_treatment_terms:
            return ["intercept"] + cov
        return ["intercept", "treatment"] + cov + [f"treatment:{c}" for c in cov]

    def control_arm(self) -> "DesignSpec":
        return DesignSpec(self.n_covariates, False, self.covariate_names)

    def build(self, X, a=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[1] != self.n_covariates:
            raise ValueError(f"expected {self.n_covariates} covariates, got {X.shape[1]}")
        ones = np.ones((X.shape[0], 1))
        if not self.includes_treatment_terms:
            return np.hstack([ones, X])
        if a is None:
            raise ValueError("treatment indicator required for a design with treatment terms")
        return build_ite_design(X, a)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    deviance: float
    iterations: int
    separation: bool = False
    spec: Optional[DesignSpec] = None
    max_abs_score: float = float("nan")
    terms: tuple = field(default=())

    def linear_predictor(self, design, offset=None) -> np.ndarray:
        eta = np.asarray(design, dtype=float) @ self.coefficients
        if offset is not None:
            eta = eta + offset
        return eta


def build_ite_design(X, a) -> np.ndarray:
    """Columns ``[1, a, x1..xp, a*x1..a*xp]``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but a has {a.shape[0]}")
    n = X.shape[0]
    return np.hstack([np.ones((n, 1)), a[:, None], X, a[:, None] * X])


def _check_rank(design: np.ndarray, names: Sequence[str]):
    p = design.shape[1]
    if design.shape[0] >= p and np.linalg.matrix_rank(design) == p:
        return
    for j in range(p):
        if np.linalg.matrix_rank(design[:, : j + 1]) < j + 1:
            name = names[j] if j < len(names) else f"column {j}"
            raise RankDeficientError(f"design matrix is rank deficient: {name!r} is collinear with earlier columns")
    raise RankDeficientError("design matrix has fewer rows than columns")


def _deviance(y, mu, w):
    mu = np.clip(mu, 1e-300, 1 - 1e-16)
    return 2.0 * np.sum(w * (xlogy(y, y) - xlogy(y, mu) + xlogy(1 - y, 1 - y) - xlogy(1 - y, 1 - mu)))


def fit_logistic(
    design,
    y,
    offset=None,
    weights=None,
    *,
    tol: float = DEV_TOL,
    max_iter: int = MAX_ITER,
    column_names: Optional[Sequence[str]] = None,
    check_rank: bool = True,
) -> LogisticFit:
    """Fit ``logit P(y=1) = design @ beta + offset`` by IRLS.

    Iterates until the change in deviance drops below ``tol`` or ``max_iter``
    Newton steps have been taken. A linear predictor beyond +/-30 at the end
    sets ``separation=True`` (with a :class:`SeparationWarning`) instead of
    aborting.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    if y.shape[0] != n:
        raise ValueError(f"design has {n} rows but y has {y.shape[0]}")
    if np.any((y < 0) | (y > 1)) or not np.isfinite(y).all():
        raise ValueError("responses must lie in [0, 1]")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    names = list(column_names) if column_names is not None else [f"column {j}" for j in range(p)]
    if check_rank:
        _check_rank(X, names)

    beta = np.zeros(p)
    eta = off.copy()
    mu = expit(eta)
    dev = _deviance(y, mu, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = np.maximum(mu * (1 - mu), 1e-12) * w
        info = X.T @ (v[:, None] * X)
        score = X.T @ (w * (y - mu))
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        new_beta = beta + step
        new_eta = X @ new_beta + off
        new_mu = expit(new_eta)
        new_dev = _deviance(y, new_mu, w)
        halvings = 0
        while new_dev > dev + 1e-10 * (1 + abs(dev)) and halvings < 20:
            step = step / 2
            new_beta = beta + step
            new_eta = X @ new_beta + off
            new_mu = expit(new_eta)
            new_dev = _deviance(y, new_mu, w)
            halvings += 1
        change = abs(new_dev - dev)
        beta, eta, mu, dev = new_beta, new_eta, new_mu, new_dev
        if change < tol:
            converged = True
            break

    max_score = float(np.max(np.abs(X.T @ (w * (y - mu))))) if p else 0.0
    separation = bool(np.max(np.abs(eta)) > SEPARATION_LP) if n else False
    if separation:
        warnings.warn("possible separation: |linear predictor| > 30 at convergence", SeparationWarning, stacklevel=2)
    return LogisticFit(beta, converged, float(dev), it, separation, None, max_score, tuple(names))


def fit_ite_model(d: TrialDataset, spec: Optional[DesignSpec] = None, weights=None) -> LogisticFit:
    """Fit the ITE logistic model (treatment, covariate and interaction terms) to ``d``."""
    spec = spec or DesignSpec(d.p)
    design = spec.build(d.X, d.a)
    fit = fit_logistic(design, d.y, weights=weights, column_names=spec.terms)
    return _with_spec(fit, spec)


def fit_control_model(d: TrialDataset, spec: Optional[DesignSpec] = None) -> LogisticFit:
    """Refit the prognostic part of ``spec`` (treatment terms dropped) in the control arm of ``d``."""
    spec = (spec or DesignSpec(d.p)).control_arm()
    ctrl = d.controls
    fit = fit_logistic(spec.build(d.X[ctrl]), d.y[ctrl], column_names=spec.terms)
    return _with_spec(fit, spec)


def _with_spec(fit: LogisticFit, spec: DesignSpec) -> LogisticFit:
    return LogisticFit(
        fit.coefficients, fit.converged, fit.deviance, fit.iterations, fit.separation, spec, fit.max_abs_score, tuple(spec.terms)
    )


def predict_potential_risks(fit: LogisticFit, X, *, allow_unconverged: bool = True) -> RiskPredictionSet:
    """Predict both potential-outcome risks by setting every row to a=0 and to a=1.

    For a control-arm (prognostic) fit both risks equal the prognostic
    prediction, so ``delta`` is zero.
    """
    if fit.spec is None:
        raise ValueError("fit carries no DesignSpec; use fit_ite_model/fit_control_model")
    if not fit.converged and not allow_unconverged:
        raise ValueError("fit did not converge")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != fit.spec.n_covariates:
        raise ValueError(f"expected {fit.spec.n_covariates} covariates, got {X.shape[1]}")
    n = X.shape[0]
    if not fit.spec.includes_treatment_terms:
        lp = fit.spec.build(X) @ fit.coefficients
        return RiskPredictionSet.from_linear_predictors(lp, lp)
    lp0 = fit.spec.build(X, np.zeros(n)) @ fit.coefficients
    lp1 = fit.spec.build(X, np.ones(n)) @ fit.coefficients
    return RiskPredictionSet.from_linear_predictors(lp0, lp1)
