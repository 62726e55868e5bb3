"""Calibration of predicted individualized treatment effects.

The main route fits, in the treated arm only,

    logit P(Y_j = 1) = b0 + b1 * delta_lp_j + offset lp0_j

where ``delta_lp`` is the predicted effect on the logit scale and ``lp0`` the
predicted control risk on the logit scale. A perfectly calibrated model gives
``(b0, b1) = (0, 1)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import MetricEstimate, RiskPredictionSet, TrialDataset
from .glm import fit_logistic

MIN_ARM_SIZE = 20
_FLAT_TOL = 1e-10

TREATED = "treated"
CONTROL = "control"


class SmallArmWarning(UserWarning):
    pass


class Calibration(NamedTuple):
    intercept: MetricEstimate
    slope: MetricEstimate

    def as_tuple(self) -> tuple[float, float]:
        return self.intercept.value, self.slope.value


def _is_flat(v) -> bool:
    v = np.asarray(v, dtype=float)
    return v.size == 0 or float(np.ptp(v)) <= _FLAT_TOL * max(1.0, float(np.max(np.abs(v))))


def ite_calibration(
    y,
    delta_lp,
    lp0,
    *,
    weights=None,
    context: str = "apparent",
    min_arm_size: int = MIN_ARM_SIZE,
) -> Calibration:
    """Offset logistic recalibration of predicted effects.

    Inputs are the treated-arm outcomes (or known event probabilities, for
    reference values), the logit-scale predicted effects and the logit-scale
    control-risk offsets. If ``delta_lp`` does not vary the slope is not
    estimable; the intercept is then fitted with the slope held at 1.
    """
    y = np.asarray(y, dtype=float)
    delta_lp = np.asarray(delta_lp, dtype=float)
    lp0 = np.asarray(lp0, dtype=float)
    n = y.shape[0]
    meta = {"n": int(n)}
    if n < min_arm_size:
        warnings.warn(f"calibration arm has only {n} individuals", SmallArmWarning, stacklevel=2)
        meta["small_arm"] = True
    if n == 0:
        return Calibration(
            MetricEstimate.non_estimable("cal_intercept", context, "empty arm"),
            MetricEstimate.non_estimable("cal_slope", context, "empty arm"),
        )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if _is_flat(delta_lp):
            fit = fit_logistic(np.ones((n, 1)), y, offset=lp0 + delta_lp, weights=weights, check_rank=False)
            meta.update(converged=fit.converged, separation=fit.separation)
            return Calibration(
                MetricEstimate("cal_intercept", fit.coefficients[0], context, {**meta, "slope_fixed": 1.0}),
                MetricEstimate.non_estimable("cal_slope", context, "predicted effects do not vary", **meta),
            )
        design = np.column_stack([np.ones(n), delta_lp])
        fit = fit_logistic(design, y, offset=lp0, weights=weights, check_rank=False)
    meta.update(converged=fit.converged, separation=fit.separation)
    if not np.all(np.isfinite(fit.coefficients)):
        return Calibration(
            MetricEstimate.non_estimable("cal_intercept", context, "calibration fit failed", **meta),
            MetricEstimate.non_estimable("cal_slope", context, "calibration fit failed", **meta),
        )
    return Calibration(
        MetricEstimate("cal_intercept", fit.coefficients[0], context, dict(meta)),
        MetricEstimate("cal_slope", fit.coefficients[1], context, dict(meta)),
    )


def ite_calibration_for(
    d: TrialDataset,
    preds: RiskPredictionSet,
    offset_preds: Optional[RiskPredictionSet] = None,
    *,
    direction: str = TREATED,
    context: str = "apparent",
    min_arm_size: int = MIN_ARM_SIZE,
) -> Calibration:
    """:func:`ite_calibration` on a trial.

    ``offset_preds`` supplies the anchor risk (default: ``preds`` itself, the
    naive choice); pass a control-arm model refitted on ``d`` for the local
    variant. ``direction="control"`` is the mirror image: fitted in the
    control arm with the treated-risk offset and ``-delta_lp`` as regressor.
    """
    anchor = preds if offset_preds is None else offset_preds
    if direction == TREATED:
        idx = d.treated
        return ite_calibration(
            d.y[idx], preds.delta_lp[idx], anchor.lp0[idx], context=context, min_arm_size=min_arm_size
        )
    if direction == CONTROL:
        idx = d.controls
        return ite_calibration(
            d.y[idx], -preds.delta_lp[idx], anchor.lp1[idx], context=context, min_arm_size=min_arm_size
        )
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True, eq=False)
class ContinuousCalibration:
    intercept: float
    slope: float
    delta: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)

    def scatter(self) -> list[tuple[float, float]]:
        return list(zip(self.delta.tolist(), self.residual.tolist()))


def ite_calibration_continuous(y_treated, g0_treated, delta_treated) -> ContinuousCalibration:
    """Least squares of treated-arm residuals ``y - g0`` on predicted effects."""
    y = np.asarray(y_treated, dtype=float)
    resid = y - np.asarray(g0_treated, dtype=float)
    delta = np.asarray(delta_treated, dtype=float)
    if _is_flat(delta):
        return ContinuousCalibration(float(np.mean(resid - delta)), float("nan"), delta, resid)
    design = np.column_stack([np.ones_like(delta), delta])
    coef = np.linalg.lstsq(design, resid, rcond=None)[0]
    return ContinuousCalibration(float(coef[0]), float(coef[1]), delta, resid)


def ate_error(d: TrialDataset, preds: RiskPredictionSet, *, context: str = "apparent") -> MetricEstimate:
    """Observed minus predicted average treatment effect.

    [mean y(treated) - mean y(control)] - [mean g1(treated) - mean g0(control)].
    """
    t, c = d.treated, d.controls
    if t.size == 0 or c.size == 0:
        raise ValueError("both arms must be non-empty")
    observed = np.mean(d.y[t]) - np.mean(d.y[c])
    expected = np.mean(preds.g1[t]) - np.mean(preds.g0[c])
    return MetricEstimate("ate_error", float(observed - expected), context, {"observed": float(observed), "expected": float(expected)})


def classical_calibration(y, lp, *, a=None, arm_filter: Optional[int] = None, context: str = "apparent") -> Calibration:
    """Logistic recalibration ``logit P(y=1) = b0 + b1 * lp``, optionally within one arm."""
    y = np.asarray(y, dtype=float)
    lp = np.asarray(lp, dtype=float)
    if arm_filter is not None:
        if a is None:
            raise ValueError("arm_filter needs the treatment indicator")
        keep = np.asarray(a) == arm_filter
        y, lp = y[keep], lp[keep]
    if _is_flat(lp):
        return Calibration(
            MetricEstimate.non_estimable("cal_intercept", context, "linear predictor does not vary"),
            MetricEstimate.non_estimable("cal_slope", context, "linear predictor does not vary"),
        )
    fit = fit_logistic(np.column_stack([np.ones_like(lp), lp]), y, check_rank=False)
    meta = {"n": int(y.size), "converged": fit.converged}
    return Calibration(
        MetricEstimate("cal_intercept", fit.coefficients[0], context, dict(meta)),
        MetricEstimate("cal_slope", fit.coefficients[1], context, dict(meta)),
    )


@dataclass(frozen=True)
class QuantileGroup:
    group: int
    lower: float
    upper: float
    size: int
    mean_delta: float
    observed_effect: float
    estimable: bool


def quantile_group_calibration(delta, y, a, n_groups: int = 4) -> list[QuantileGroup]:
    """Mean predicted versus observed treatment effect within quantile groups of ``delta``.

    Groups are right-closed intervals between empirical quantiles; values
    equal to a cut-off go to the lower group. Groups that are empty or lack
    one arm are returned with ``estimable=False``.
    """
    if n_groups < 2:
        raise ValueError("n_groups must be >= 2")
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.asarray(a)
    cuts = np.quantile(delta, np.arange(1, n_groups) / n_groups)
    group = np.searchsorted(cuts, delta, side="left")
    edges = np.concatenate([[delta.min()], cuts, [delta.max()]])
    out = []
    for g in range(n_groups):
        m = group == g
        t = m & (a == 1)
        c = m & (a == 0)
        ok = bool(t.any() and c.any())
        out.append(
            QuantileGroup(
                g,
                float(edges[g]),
                float(edges[g + 1]),
                int(m.sum()),
                float(delta[m].mean()) if m.any() else float("nan"),
                float(y[t].mean() - y[c].mean()) if ok else float("nan"),
                ok,
            )
        )
    return out

