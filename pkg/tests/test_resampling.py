import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from itevalid.concordance import sample_reference_mbcb
from itevalid.glm import fit_ite_model, predict_potential_risks
from itevalid.resampling import (
    LOCAL_REFIT,
    NAIVE,
    ValidationPlan,
    evaluate_metrics,
    external_validate,
    internal_validate,
    plus632_combine,
    plus632_terms,
)
from itevalid.simulation import DGM1, DGM2, generate_population

unit = st.floats(0, 1, allow_nan=False)


def test_plus632_examples():
    assert plus632_combine(0.7, 0.6, 0.5) == pytest.approx(0.7 - 0.1 * 0.632 / 0.816, abs=1e-12)
    assert plus632_combine(0.7, 0.6, 0.5) == pytest.approx(0.622549019607843, abs=1e-12)
    assert plus632_combine(0.7, 0.5, 0.5) == pytest.approx(0.5, abs=1e-15)
    assert plus632_terms(0.64, 0.64, 0.5)[1:] == (0.0, 0.632, 0.64)
    # oos beyond gamma is clipped to gamma
    assert plus632_combine(0.7, 0.45, 0.5) == pytest.approx(0.5, abs=1e-15)
    assert plus632_combine(0.5, 0.7, 0.5) == 0.5
    # below-gamma apparent values mirror
    assert plus632_combine(0.3, 0.4, 0.5) == pytest.approx(1 - plus632_combine(0.7, 0.6, 0.5), abs=1e-12)


@settings(max_examples=500)
@given(unit, unit, st.sampled_from([0.0, 0.5]))
def test_plus632_invariants(c_app, c_oos, gamma):
    c_oos_c, r, w, est = plus632_terms(c_app, c_oos, gamma)
    assert 0.0 <= r <= 1.0
    assert 0.632 <= w <= 1.0 + 1e-15
    lo, hi = min(c_app, c_oos_c), max(c_app, c_oos_c)
    assert lo - 1e-12 <= est <= hi + 1e-12


@settings(max_examples=200)
@given(st.floats(-2, 3), st.floats(-2, 3))
def test_plus632_slope_scale(c_app, c_oos):
    assume(c_app != 0.0)
    _, r, w, est = plus632_terms(c_app, c_oos, 0.0)
    assert 0 <= r <= 1 and 0.632 <= w <= 1 + 1e-15


def test_plan_validation():
    with pytest.raises(ValueError):
        ValidationPlan(B=0)
    with pytest.raises(ValueError):
        ValidationPlan(gamma={"mbcb": 0.5})


def _small_trial(seed=1, n=300):
    return generate_population(DGM1, seed, n).trial()


def test_identity_resample_gives_zero_optimism():
    d = _small_trial()
    plan = ValidationPlan(B=1, repeats=20, inner_repeats=20)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = internal_validate(d, plan=plan, resamples=[np.arange(d.n)])
    for m in ("cben_delta", "cben_y0", "mbcb", "cal_intercept", "cal_slope", "ate_error"):
        assert res.optimism_corrected[m].meta["optimism"] == pytest.approx(0.0, abs=1e-12)
        assert res.optimism_corrected[m].value == pytest.approx(res.apparent[m].value, abs=1e-12)
    # nothing is out of sample
    assert res.dropped_oos == 1


def test_optimism_bookkeeping_and_reproducibility():
    d = _small_trial(2)
    plan = ValidationPlan(B=8, seed=11, repeats=20, inner_repeats=20)
    a = internal_validate(d, plan=plan)
    b = internal_validate(d, plan=plan)
    for m in plan.metrics:
        assert a.optimism_corrected[m].value == b.optimism_corrected[m].value
        if m in a.boot632plus:
            x, y = a.boot632plus[m].value, b.boot632plus[m].value
            assert x == y or (np.isnan(x) and np.isnan(y))
        diffs = [r["apparent"][m] - r["original"][m] for r in a.replicates]
        diffs = [x for x in diffs if np.isfinite(x)]
        assert a.optimism_corrected[m].value == pytest.approx(a.apparent[m].value - np.mean(diffs), abs=1e-12)
    assert not a.boot632plus["cal_intercept"].estimable
    assert "ate_error" not in a.boot632plus
    for m in ("cben_delta", "cben_y0", "mbcb", "cal_slope"):
        e = a.boot632plus[m]
        lo, hi = sorted((a.apparent[m].value, e.meta["c_oos_clipped"]))
        assert lo - 1e-12 <= e.value <= hi + 1e-12
    c = internal_validate(d, plan=ValidationPlan(B=8, seed=12, repeats=20, inner_repeats=20))
    assert c.optimism_corrected["mbcb"].value != a.optimism_corrected["mbcb"].value


def test_apparent_calibration_in_internal_validation():
    d = _small_trial(3)
    res = internal_validate(d, plan=ValidationPlan(B=2, repeats=20, inner_repeats=20))
    assert abs(res.apparent["cal_intercept"].value) < 1e-6
    assert abs(res.apparent["cal_slope"].value - 1) < 1e-6


def test_external_naive_and_local_refit():
    dev = _small_trial(4, 500)
    ext = generate_population(DGM2, 5, 1000).trial()
    fit = fit_ite_model(dev)
    naive = external_validate(fit, ext, NAIVE, repeats=50)
    local = external_validate(fit, ext, LOCAL_REFIT, repeats=50)
    # cben_delta does not use any refit
    assert naive["cben_delta"].value == local["cben_delta"].value
    assert naive["mbcb"].value != local["mbcb"].value
    assert all(e.context == "external" and e.meta["mode"] in (NAIVE, LOCAL_REFIT) for e in local.values())
    with pytest.raises(ValueError):
        external_validate(fit, ext, "bogus")


def test_local_refit_falls_back_with_warning():
    dev = _small_trial(6, 500)
    ext = generate_population(DGM1, 7, 60).trial()
    # constant covariate column makes the refit design rank deficient
    ext = type(ext)(ext.y, ext.a, np.column_stack([ext.X[:, 0], np.ones(ext.n)]))
    fit = fit_ite_model(dev)
    with pytest.warns(RuntimeWarning, match="falling back"):
        out = external_validate(fit, ext, LOCAL_REFIT, repeats=20)
    assert "fallback" in out["mbcb"].meta
    naive = external_validate(fit, ext, NAIVE, repeats=20)
    assert out["mbcb"].value == naive["mbcb"].value


def test_local_refit_on_development_dgm_tracks_sample_reference():
    errs = []
    for s in range(20):
        fit = fit_ite_model(_small_trial(300 + s, 500))
        pop = generate_population(DGM1, 400 + s, 1000)
        est = external_validate(fit, pop.trial(), LOCAL_REFIT, metrics=("mbcb",))["mbcb"].value
        ref = sample_reference_mbcb(predict_potential_risks(fit, pop.X), pop.truth.g0, pop.truth.g1).value
        errs.append(est - ref)
    assert abs(np.mean(errs)) < 0.01


def test_evaluate_metrics_subset():
    d = _small_trial(8)
    preds = predict_potential_risks(fit_ite_model(d), d.X)
    out = evaluate_metrics(d, preds, metrics=("mbcb", "brier", "c_outcome"))
    assert set(out) == {"mbcb", "brier", "c_outcome"}
    assert 0 < out["brier"].value < 0.25
