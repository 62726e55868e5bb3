"""Internal (bootstrap) and external validation of an ITE logistic model.

Internal validation reports, per metric, the apparent value, the 0.632+
estimate and the optimism-corrected estimate:

* optimism: for each bootstrap model, performance in its own resample minus
  performance in the original data; the mean is subtracted from the apparent
  value;
* 0.632+: apparent value blended with the mean out-of-sample value (cases not
  drawn into the resample) through :func:`plus632_combine`.

What "evaluated on original data" and "out of sample" mean differs by metric:

==============  ==========================================  ==========================================
metric          optimism (bootstrap model on original data)  0.632+ (out-of-sample cases)
==============  ==========================================  ==========================================
cben_delta      bootstrap-model delta                        bootstrap-model delta
cben_y0         matched on bootstrap-model g0                matched on bootstrap-model g0
mbcb            benefit probabilities from development model benefit probabilities from a model refitted
                                                             on the out-of-sample cases
calibration     offset from development model                offset from a control model refitted on the
                                                             out-of-sample controls; slope only
==============  ==========================================  ==========================================
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import concordance as conc
from .calibration import ate_error, ite_calibration_for
from .data import MetricEstimate, RiskPredictionSet, TrialDataset, validate_dataset
from .glm import DesignSpec, LogisticFit, fit_control_model, fit_ite_model, predict_potential_risks

log = logging.getLogger(__name__)

NAIVE = "naive"
LOCAL_REFIT = "local_refit"

DEFAULT_GAMMA = {"cben_delta": 0.5, "cben_y0": 0.5, "mbcb": 0.5, "c_outcome": 0.5, "cal_slope": 0.0}
DEFAULT_METRICS = ("cben_delta", "cben_y0", "mbcb", "cal_intercept", "cal_slope", "ate_error")
MAX_DROP_FRACTION = 0.2


class DroppedReplicatesWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ValidationPlan:
    B: int = 100
    metrics: tuple = DEFAULT_METRICS
    gamma: dict = field(default_factory=lambda: dict(DEFAULT_GAMMA))
    seed: int = 0
    stratified: bool = False
    repeats: int = conc.DEFAULT_REPEATS
    inner_repeats: int = 100

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        for m in self.metrics:
            if m in ("cben_delta", "cben_y0", "mbcb", "cal_slope") and m not in self.gamma:
                raise ValueError(f"no no-information value for {m}")


def plus632_terms(c_app: float, c_oos: float, gamma: float) -> tuple[float, float, float, float]:
    """Return ``(c_oos_clipped, R, w, estimate)`` of the adapted 0.632+ rule.

    The out-of-sample value is clipped at ``gamma`` so the correction never
    crosses the no-information value; ``R`` is the relative overfitting and
    ``w = 0.632 / (1 - 0.368 R)``.
    """
    if c_app >= gamma:
        c_oos_c = max(gamma, c_oos)
    else:
        c_oos_c = min(gamma, c_oos)
    if c_app == gamma:
        return c_oos_c, 0.0, 0.632, c_app
    if abs(c_oos_c - gamma) < abs(c_app - gamma):
        r = abs(c_app - c_oos_c) / abs(c_app - gamma)
    else:
        r = 0.0
    w = 0.632 / (1.0 - 0.368 * r)
    return c_oos_c, r, w, c_app * (1.0 - w) + w * c_oos_c


def plus632_combine(c_app: float, c_oos: float, gamma: float) -> float:
    return plus632_terms(c_app, c_oos, gamma)[3]


# ---------------------------------------------------------------------------
# per-dataset metric evaluation


def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _assigned_risk(d: TrialDataset, p: RiskPredictionSet) -> np.ndarray:
    return np.where(d.a == 1, p.g1, p.g0)


def evaluate_metrics(
    d: TrialDataset,
    preds: RiskPredictionSet,
    *,
    metrics: Sequence[str] = DEFAULT_METRICS,
    benefit_preds: Optional[RiskPredictionSet] = None,
    matching_preds: Optional[RiskPredictionSet] = None,
    offset_preds: Optional[RiskPredictionSet] = None,
    repeats: int = conc.DEFAULT_REPEATS,
    seed=None,
    context: str = "apparent",
) -> dict[str, MetricEstimate]:
    """Evaluate the requested metrics of ``preds`` on ``d``.

    ``benefit_preds``, ``matching_preds`` and ``offset_preds`` override the
    predictions used for mbcb benefit probabilities, cben_y0 matching and the
    calibration offset respectively.
    """
    out: dict[str, MetricEstimate] = {}
    ss = np.random.SeedSequence(seed)
    s_delta, s_y0 = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    if "cben_delta" in metrics:
        out["cben_delta"] = conc.cben_delta(d, preds, repeats=repeats, seed=s_delta, context=context)
    if "cben_y0" in metrics:
        out["cben_y0"] = conc.cben_y0(d, preds, matching_preds, repeats=repeats, seed=s_y0, context=context)
    if "mbcb" in metrics:
        out["mbcb"] = conc.mbcb(preds, benefit_preds, context=context)
    if "cal_intercept" in metrics or "cal_slope" in metrics:
        cal = ite_calibration_for(d, preds, offset_preds, context=context, min_arm_size=0)
        if "cal_intercept" in metrics:
            out["cal_intercept"] = cal.intercept
        if "cal_slope" in metrics:
            out["cal_slope"] = cal.slope
    if "ate_error" in metrics:
        out["ate_error"] = ate_error(d, preds, context=context)
    if "c_outcome" in metrics:
        out["c_outcome"] = conc.c_outcome(d.y, _assigned_risk(d, preds), context=context)
    if "brier" in metrics:
        out["brier"] = conc.brier(d.y, _assigned_risk(d, preds), context=context)
    return out


# ---------------------------------------------------------------------------
# internal validation


@dataclass
class InternalValidation:
    apparent: dict
    boot632plus: dict
    optimism_corrected: dict
    replicates: list = field(default_factory=list, repr=False)
    dropped_fit: int = 0
    dropped_oos: int = 0
    B: int = 0

    def estimates(self) -> list[MetricEstimate]:
        out = []
        for group in (self.apparent, self.boot632plus, self.optimism_corrected):
            out.extend(group.values())
        return out


def _resample(d: TrialDataset, rng: np.random.Generator, stratified: bool) -> np.ndarray:
    if not stratified:
        return rng.integers(0, d.n, d.n)
    parts = [arm[rng.integers(0, arm.size, arm.size)] for arm in (d.controls, d.treated)]
    return np.concatenate(parts)


def _value(e: Optional[MetricEstimate]) -> float:
    return e.value if e is not None else float("nan")


def internal_validate(
    d: TrialDataset,
    model_spec: Optional[DesignSpec] = None,
    plan: Optional[ValidationPlan] = None,
    *,
    resamples: Optional[Iterable[np.ndarray]] = None,
) -> InternalValidation:
    """Bootstrap 0.632+ and optimism-corrected validation of the ITE model on ``d``.

    ``resamples`` may supply explicit bootstrap index arrays (mainly for
    testing); otherwise ``plan.B`` resamples are drawn with replicate ``b``
    using the RNG stream derived from ``(plan.seed, b)``.
    """
    plan = plan or ValidationPlan()
    validate_dataset(d)
    spec = model_spec or DesignSpec(d.p)
    metrics = tuple(plan.metrics)
    dev_fit = fit_ite_model(d, spec)
    dev_preds = predict_potential_risks(dev_fit, d.X)
    apparent = evaluate_metrics(d, dev_preds, metrics=metrics, repeats=plan.repeats, seed=[plan.seed, 1])

    if resamples is None:
        resample_list = None
        n_rep = plan.B
    else:
        resample_list = [np.asarray(r) for r in resamples]
        n_rep = len(resample_list)

    optimism: dict[str, list] = {m: [] for m in metrics}
    oos_values: dict[str, list] = {m: [] for m in metrics}
    replicates = []
    dropped_fit = dropped_oos = 0
    for b in range(n_rep):
        rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(b,)))
        idx = resample_list[b] if resample_list is not None else _resample(d, rng, plan.stratified)
        db = d.subset(idx)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit_b = fit_ite_model(db, spec)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("replicate %d dropped: %s", b, exc)
            dropped_fit += 1
            continue
        p_boot = predict_potential_risks(fit_b, db.X)
        p_orig = predict_potential_risks(fit_b, d.X)
        app_b = evaluate_metrics(db, p_boot, metrics=metrics, repeats=plan.inner_repeats, seed=_seed_from(rng))
        test_b = evaluate_metrics(
            d,
            p_orig,
            metrics=metrics,
            benefit_preds=dev_preds,
            offset_preds=dev_preds,
            repeats=plan.inner_repeats,
            seed=_seed_from(rng),
        )
        rec = {"b": b, "apparent": {}, "original": {}, "oos": {}}
        for m in metrics:
            a_v, t_v = _value(app_b.get(m)), _value(test_b.get(m))
            rec["apparent"][m], rec["original"][m] = a_v, t_v
            if np.isfinite(a_v) and np.isfinite(t_v):
                optimism[m].append(a_v - t_v)

        in_bag = np.zeros(d.n, dtype=bool)
        in_bag[idx] = True
        oos = np.flatnonzero(~in_bag)
        d_oos = d.subset(oos) if oos.size else None
        if d_oos is None or d_oos.controls.size < 2 or d_oos.treated.size < 2:
            dropped_oos += 1
            replicates.append(rec)
            continue
        p_oos = p_orig.subset(oos)
        benefit_oos = offset_oos = None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if "mbcb" in metrics:
                    benefit_oos = predict_potential_risks(fit_ite_model(d_oos, spec), d_oos.X)
                if "cal_slope" in metrics:
                    offset_oos = predict_potential_risks(fit_control_model(d_oos, spec), d_oos.X)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("replicate %d out-of-sample refit failed: %s", b, exc)
            dropped_oos += 1
            replicates.append(rec)
            continue
        oos_metrics = [m for m in metrics if m in plan.gamma]
        oos_est = evaluate_metrics(
            d_oos,
            p_oos,
            metrics=oos_metrics,
            benefit_preds=benefit_oos,
            offset_preds=offset_oos,
            repeats=plan.inner_repeats,
            seed=_seed_from(rng),
        )
        for m in oos_metrics:
            v = _value(oos_est.get(m))
            rec["oos"][m] = v
            if np.isfinite(v):
                oos_values[m].append(v)
        replicates.append(rec)

    if n_rep and (dropped_fit + dropped_oos) > MAX_DROP_FRACTION * n_rep:
        warnings.warn(
            f"{dropped_fit} replicate fits and {dropped_oos} out-of-sample sets dropped out of {n_rep}",
            DroppedReplicatesWarning,
            stacklevel=2,
        )

    meta_common = {"B": n_rep, "dropped_fit": dropped_fit, "dropped_oos": dropped_oos, "inner_repeats": plan.inner_repeats}
    corrected, plus = {}, {}
    for m in metrics:
        app = apparent[m]
        opt = optimism[m]
        if app.estimable and opt:
            o = float(np.mean(opt))
            corrected[m] = MetricEstimate(m, app.value - o, "optimism_corrected", {**meta_common, "optimism": o, "used": len(opt)})
        else:
            corrected[m] = MetricEstimate.non_estimable(m, "optimism_corrected", "no usable replicates", **meta_common)
        if m == "cal_intercept":
            plus[m] = MetricEstimate.non_estimable(m, "boot632plus", "no no-information intercept exists", **meta_common)
            continue
        if m not in plan.gamma:
            continue
        vals = oos_values[m]
        if app.estimable and vals:
            c_oos = float(np.mean(vals))
            c_oos_c, r, w, est = plus632_terms(app.value, c_oos, plan.gamma[m])
            plus[m] = MetricEstimate(
                m, est, "boot632plus", {**meta_common, "c_oos": c_oos, "c_oos_clipped": c_oos_c, "R": r, "w": w, "used": len(vals)}
            )
        else:
            plus[m] = MetricEstimate.non_estimable(m, "boot632plus", "no usable out-of-sample replicates", **meta_common)

    return InternalValidation(apparent, plus, corrected, replicates, dropped_fit, dropped_oos, n_rep)


# ---------------------------------------------------------------------------
# external validation


def external_validate(
    model: LogisticFit,
    d_ext: TrialDataset,
    mode: str = NAIVE,
    *,
    metrics: Sequence[str] = DEFAULT_METRICS + ("c_outcome", "brier"),
    repeats: int = conc.DEFAULT_REPEATS,
    seed=0,
) -> dict[str, MetricEstimate]:
    """Evaluate a fitted ITE model on independent data.

    ``naive`` takes every prediction from ``model``. ``local_refit`` refits
    the control-arm part of the model on ``d_ext`` (for cben_y0 matching and
    the calibration offset) and the full model structure on ``d_ext`` (for
    the mbcb benefit probabilities); cben_delta is unaffected. If a refit
    fails the naive values are returned with ``meta["fallback"]`` set.
    """
    if mode not in (NAIVE, LOCAL_REFIT):
        raise ValueError(f"unknown external validation mode {mode!r}")
    validate_dataset(d_ext)
    preds = predict_potential_risks(model, d_ext.X)
    kwargs = {}
    fallback = None
    if mode == LOCAL_REFIT:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ctrl = predict_potential_risks(fit_control_model(d_ext, model.spec), d_ext.X)
                full = predict_potential_risks(fit_ite_model(d_ext, model.spec), d_ext.X)
            kwargs = {"matching_preds": ctrl, "offset_preds": ctrl, "benefit_preds": full}
        except (ValueError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"local refit failed ({exc}); falling back to naive evaluation", RuntimeWarning, stacklevel=2)
            fallback = str(exc)
    est = evaluate_metrics(d_ext, preds, metrics=metrics, repeats=repeats, seed=seed, context="external", **kwargs)
    tag = {"mode": mode}
    if fallback is not None:
        tag["fallback"] = fallback
    return {k: v.with_context("external", **tag) for k, v in est.items()}
