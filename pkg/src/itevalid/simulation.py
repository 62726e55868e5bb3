"""Monte Carlo study of ITE discrimination and calibration statistics.

Two logistic data-generating mechanisms over covariates ``x1, x2 ~ N(0, 1)``:

* DGM-1: ``logit P(Y^a = 1) = -1 - 0.75 a + x1 + 0.5 a x2``
* DGM-2: ``logit P(Y^a = 1) = -0.5 - 0.5 a + 0.75 x1 + 0.25 x2 + 0.25 a x1 + 0.25 a x2``

Each run draws a development set D and a validation set V1 from the DGM-1
population and a validation set V2 (fixed size) from the DGM-2 population,
fits the ITE model in D and evaluates it in every setting:

=====================  =====================================================
setting                evaluation
=====================  =====================================================
apparent               D, model's own predictions
boot632plus            D, bootstrap 0.632+
optimism_corrected     D, bootstrap optimism correction
V1, V2                 external samples, model predictions only
V1*, V2*               external samples, local control / full refits
pop1, pop2             whole populations, model predictions only
=====================  =====================================================

Every row carries the sample reference (true benefit probabilities / known
event probabilities on the evaluation sample), the population reference
(realized potential outcomes / known probabilities over the matching
population) and, for calibration, the naive population reference whose
offset comes from the evaluated model.
"""
from __future__ import annotations

import logging
import os
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from . import concordance as conc
from .calibration import ite_calibration
from .data import MetricEstimate, PopulationWithTruth, RiskPredictionSet, TrialDataset
from .glm import DesignSpec, LogisticFit, build_ite_design, fit_ite_model, predict_potential_risks
from .resampling import LOCAL_REFIT, NAIVE, ValidationPlan, evaluate_metrics, external_validate, internal_validate

log = logging.getLogger(__name__)

DISCRIMINATION = ("cben_delta", "cben_y0", "mbcb")
CALIBRATION = ("cal_intercept", "cal_slope")
STUDY_METRICS = DISCRIMINATION + CALIBRATION + ("ate_error",)
SETTINGS = ("apparent", "boot632plus", "optimism_corrected", "V1", "V2", "V1*", "V2*", "pop1", "pop2")
THREADS_ENV = "ITEVALID_THREADS"


@dataclass(frozen=True)
class DGMSpec:
    """Logistic DGM; ``beta`` is ordered like the ITE design ``[1, a, x.., a*x..]``."""

    beta: tuple
    name: str = "dgm"
    n_population: int = 100_000

    def __post_init__(self):
        if len(self.beta) < 4 or len(self.beta) % 2:
            raise ValueError("beta must have length 2p + 2")

    @property
    def p(self) -> int:
        return (len(self.beta) - 2) // 2

    def risks(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        n = X.shape[0]
        p0 = expit(build_ite_design(X, np.zeros(n)) @ b)
        p1 = expit(build_ite_design(X, np.ones(n)) @ b)
        return p0, p1


DGM1 = DGMSpec((-1.0, -0.75, 1.0, 0.0, 0.0, 0.5), "DGM-1")
DGM2 = DGMSpec((-0.5, -0.5, 0.75, 0.25, 0.25, 0.25), "DGM-2")


@dataclass(frozen=True)
class StudyConfig:
    n_sim: int = 500
    sample_sizes: tuple = (500, 750, 1000)
    v2_size: int = 1000
    B: int = 100
    seed: int = 20240101
    n_population: int = 100_000
    repeats: int = 1000
    inner_repeats: int = 100
    bootstrap: bool = True
    bootstrap_sizes: Optional[tuple] = None
    stratified: bool = False
    population_settings: bool = True
    dgm_dev: DGMSpec = DGM1
    dgm_ext: DGMSpec = DGM2

    def __post_init__(self):
        for name in ("n_sim", "v2_size", "B", "n_population", "repeats", "inner_repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ValueError("sample sizes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_sizes"] = list(self.sample_sizes)
        d["bootstrap_sizes"] = None if self.bootstrap_sizes is None else list(self.bootstrap_sizes)
        d["dgm_dev"] = {"name": self.dgm_dev.name, "beta": list(self.dgm_dev.beta)}
        d["dgm_ext"] = {"name": self.dgm_ext.name, "beta": list(self.dgm_ext.beta)}
        return d


PRESETS = {
    "full": StudyConfig(),
    "paper-desk": StudyConfig(n_sim=200),
    "smoke": StudyConfig(n_sim=3, sample_sizes=(300,), v2_size=300, B=5, n_population=5000, repeats=20, inner_repeats=5),
}


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def substream(seed: int, *key) -> np.random.Generator:
    """RNG for ``(seed, key...)``; string parts of the key are hashed to stable ints."""
    spawn_key = tuple(_tag(k) if isinstance(k, str) else int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


def generate_population(spec: DGMSpec, seed=None, n: Optional[int] = None) -> PopulationWithTruth:
    """Covariates, true risks, one draw of both potential outcomes and a 1:1 randomization."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = spec.n_population if n is None else n
    X = rng.standard_normal((n, spec.p))
    p0, p1 = spec.risks(X)
    y0 = (rng.random(n) < p0).astype(np.int8)
    y1 = (rng.random(n) < p1).astype(np.int8)
    a = np.zeros(n, dtype=np.int8)
    a[rng.permutation(n)[: n // 2]] = 1
    return PopulationWithTruth(X, p0, p1, y0, y1, a)


# ---------------------------------------------------------------------------
# references


def calibration_reference(pop: PopulationWithTruth, preds: RiskPredictionSet, offset_lp0=None, *, context="population_reference"):
    """Calibration estimand in the treated part of ``pop``.

    Outcomes are the known treated-risk probabilities; the offset is the
    logit of the known control risk unless ``offset_lp0`` (for the naive
    reference: the evaluated model's own ``lp0``) is given.
    """
    t = np.flatnonzero(pop.a == 1)
    truth = pop.truth
    lp0 = truth.lp0[t] if offset_lp0 is None else np.asarray(offset_lp0)[t]
    return ite_calibration(pop.p1[t], preds.delta_lp[t], lp0, context=context, min_arm_size=0)


def ate_reference(pop: PopulationWithTruth, preds: RiskPredictionSet) -> float:
    return float(np.mean(pop.p1 - pop.p0) - np.mean(preds.g1 - preds.g0))


def compute_references(
    pop: PopulationWithTruth, preds: RiskPredictionSet, *, population: bool = False
) -> dict[str, MetricEstimate]:
    """Reference values for ``preds`` on ``pop`` (a sample or a whole population).

    Returns the discrimination reference (``mbcb`` key) and calibration
    references (``cal_intercept``/``cal_slope``), plus naive calibration
    references under ``naive_*`` keys and the ATE reference.
    ``population=True`` uses realized potential outcomes for discrimination,
    otherwise the true benefit probabilities.
    """
    ctx = "population_reference" if population else "sample_reference"
    if population:
        disc = conc.c_delta_ben(preds.delta, pop.y0, pop.y1, context=ctx)
    else:
        disc = conc.sample_reference_mbcb(preds, pop.p0, pop.p1, context=ctx)
    cal = calibration_reference(pop, preds, context=ctx)
    naive = calibration_reference(pop, preds, offset_lp0=preds.lp0, context="naive_reference")
    return {
        "mbcb": disc,
        "cal_intercept": cal.intercept,
        "cal_slope": cal.slope,
        "naive_cal_intercept": naive.intercept,
        "naive_cal_slope": naive.slope,
        "ate_error": MetricEstimate("ate_error", ate_reference(pop, preds), ctx),
    }


# ---------------------------------------------------------------------------
# study loop


@dataclass
class SimulationResult:
    config: StudyConfig
    records: pd.DataFrame
    failures: list = field(default_factory=list)

    def table(self, metric: str, setting: str, n: Optional[int] = None) -> pd.DataFrame:
        r = self.records
        m = (r.metric == metric) & (r.setting == setting)
        if n is not None:
            m &= r.n == n
        return r[m]


_REF_KEYS = {
    "cben_delta": ("mbcb", None),
    "cben_y0": ("mbcb", None),
    "mbcb": ("mbcb", None),
    "cal_intercept": ("cal_intercept", "naive_cal_intercept"),
    "cal_slope": ("cal_slope", "naive_cal_slope"),
    "ate_error": ("ate_error", None),
}


def _rows(run, n, setting, estimates, sample_ref, pop_ref):
    out = []
    for m in STUDY_METRICS:
        e = estimates.get(m)
        if e is None:
            continue
        key, naive_key = _REF_KEYS[m]
        out.append(
            {
                "run": run,
                "n": n,
                "setting": setting,
                "metric": m,
                "estimate": e.value,
                "sample_ref": sample_ref[key].value if sample_ref else np.nan,
                "population_ref": pop_ref[key].value,
                "naive_ref": pop_ref[naive_key].value if naive_key else np.nan,
            }
        )
    return out


def _draw(pop: PopulationWithTruth, size: int, rng, exclude=None) -> np.ndarray:
    pool = np.arange(pop.N) if exclude is None else np.setdiff1d(np.arange(pop.N), exclude)
    return np.sort(rng.choice(pool, size=size, replace=False))


def simulate_run(config: StudyConfig, run: int, n: int, pop1: PopulationWithTruth, pop2: PopulationWithTruth) -> list[dict]:
    """All settings for one (run, sample size) cell."""
    seed = config.seed
    rng = substream(seed, run, n, "samples")
    idx_d = _draw(pop1, n, rng)
    idx_v1 = _draw(pop1, n, rng, exclude=idx_d)
    idx_v2 = _draw(pop2, config.v2_size, rng)
    s_d, s_v1, s_v2 = pop1.subset(idx_d), pop1.subset(idx_v1), pop2.subset(idx_v2)
    D, V1, V2 = s_d.trial(), s_v1.trial(), s_v2.trial()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_ite_model(D)
    spec = fit.spec
    preds_pop1 = predict_potential_risks(fit, pop1.X)
    preds_pop2 = predict_potential_risks(fit, pop2.X)
    pref1 = compute_references(pop1, preds_pop1, population=True)
    pref2 = compute_references(pop2, preds_pop2, population=True)
    sref_d = compute_references(s_d, preds_pop1.subset(idx_d))
    sref_v1 = compute_references(s_v1, preds_pop1.subset(idx_v1))
    sref_v2 = compute_references(s_v2, preds_pop2.subset(idx_v2))

    metrics = STUDY_METRICS
    rows: list[dict] = []
    do_boot = config.bootstrap and (config.bootstrap_sizes is None or n in config.bootstrap_sizes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if do_boot:
            plan = ValidationPlan(
                B=config.B,
                metrics=metrics,
                seed=int(substream(seed, run, n, "bootstrap").integers(2**62)),
                stratified=config.stratified,
                repeats=config.repeats,
                inner_repeats=config.inner_repeats,
            )
            iv = internal_validate(D, spec, plan)
            rows += _rows(run, n, "apparent", iv.apparent, sref_d, pref1)
            rows += _rows(run, n, "boot632plus", iv.boot632plus, sref_d, pref1)
            rows += _rows(run, n, "optimism_corrected", iv.optimism_corrected, sref_d, pref1)
        else:
            app = evaluate_metrics(D, predict_potential_risks(fit, D.X), metrics=metrics, repeats=config.repeats, seed=[seed, run, n, 1])
            rows += _rows(run, n, "apparent", app, sref_d, pref1)

        ext_seed = int(substream(seed, run, n, "external").integers(2**62))
        for label, data, sref, pref in (("V1", V1, sref_v1, pref1), ("V2", V2, sref_v2, pref2)):
            naive = external_validate(fit, data, NAIVE, metrics=metrics, repeats=config.repeats, seed=ext_seed)
            local = external_validate(fit, data, LOCAL_REFIT, metrics=("cben_y0", "mbcb") + CALIBRATION, repeats=config.repeats, seed=ext_seed)
            rows += _rows(run, n, label, naive, sref, pref)
            rows += _rows(run, n, label + "*", local, sref, pref)

        if config.population_settings:
            for label, pop, preds, pref in (("pop1", pop1, preds_pop1, pref1), ("pop2", pop2, preds_pop2, pref2)):
                est = evaluate_metrics(pop.trial(), preds, metrics=metrics, repeats=1, seed=ext_seed)
                rows += _rows(run, n, label, est, None, pref)
    return rows


def _worker_count(n_jobs: Optional[int]) -> int:
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def run_study(
    config: StudyConfig,
    *,
    n_jobs: Optional[int] = None,
    progress: Optional[Callable[[int, int], None]] = None,
    populations: Optional[tuple] = None,
) -> SimulationResult:
    """Run every (run, sample size) cell of the study.

    Populations are generated once from the master seed. Cells use RNG
    substreams keyed by (seed, run, size, purpose), so results do not depend
    on execution order or on ``n_jobs``.
    """
    if populations is None:
        pop1 = generate_population(config.dgm_dev, substream(config.seed, "population", 1), config.n_population)
        pop2 = generate_population(config.dgm_ext, substream(config.seed, "population", 2), config.n_population)
    else:
        pop1, pop2 = populations
    cells = [(run, n) for n in config.sample_sizes for run in range(config.n_sim)]
    jobs = _worker_count(n_jobs)
    failures: list = []
    rows: list = []

    def one(cell):
        run, n = cell
        try:
            return simulate_run(config, run, n, pop1, pop2), None
        except Exception as exc:  # run-level failure: excluded and counted
            log.warning("run %d (n=%d) failed: %s", run, n, exc)
            return [], {"run": run, "n": n, "error": repr(exc)}

    if jobs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(one)(c) for c in cells)
    else:
        results = []
        for k, c in enumerate(cells):
            results.append(one(c))
            if progress is not None:
                progress(k + 1, len(cells))
    for r, f in results:
        rows.extend(r)
        if f is not None:
            failures.append(f)
    records = pd.DataFrame(rows, columns=["run", "n", "setting", "metric", "estimate", "sample_ref", "population_ref", "naive_ref"])
    return SimulationResult(config, records, failures)


# ---------------------------------------------------------------------------
# summaries


def performance_summary(results: SimulationResult | pd.DataFrame) -> pd.DataFrame:
    """Mean, SD, bias and RMSE of every metric x setting x sample size.

    Bias is ``mean(reference - estimate)`` and RMSE is
    ``sqrt(mean((reference - estimate)^2))``, both against the population
    reference; runs where either value is missing are left out.
    """
    r = results.records if isinstance(results, SimulationResult) else results
    out = []
    for (metric, setting, n), g in r.groupby(["metric", "setting", "n"], sort=False):
        ok = np.isfinite(g.estimate.to_numpy()) & np.isfinite(g.population_ref.to_numpy())
        est = g.estimate.to_numpy()[ok]
        ref = g.population_ref.to_numpy()[ok]
        err = ref - est
        out.append(
            {
                "metric": metric,
                "setting": setting,
                "n": int(n),
                "runs": int(ok.sum()),
                "mean": float(np.mean(est)) if est.size else np.nan,
                "sd": float(np.std(est, ddof=1)) if est.size > 1 else np.nan,
                "mean_sample_ref": float(np.nanmean(g.sample_ref)) if g.sample_ref.notna().any() else np.nan,
                "mean_population_ref": float(np.mean(ref)) if ref.size else np.nan,
                "mean_naive_ref": float(np.nanmean(g.naive_ref)) if g.naive_ref.notna().any() else np.nan,
                "bias": float(np.mean(err)) if err.size else np.nan,
                "rmse": float(np.sqrt(np.mean(err**2))) if err.size else np.nan,
            }
        )
    df = pd.DataFrame(out)
    if df.empty:
        return df
    order = {s: k for k, s in enumerate(SETTINGS)}
    morder = {m: k for k, m in enumerate(STUDY_METRICS)}
    df["_s"] = df.setting.map(order)
    df["_m"] = df.metric.map(morder)
    return df.sort_values(["n", "_m", "_s"]).drop(columns=["_s", "_m"]).reset_index(drop=True)


def plot_data(summary: pd.DataFrame) -> pd.DataFrame:
    """Mean +/- 1 SD per metric, setting and sample size, with the panel it belongs to."""
    panel = {
        "apparent": "apparent/development",
        "V1": "apparent/same DGM",
        "V2": "apparent/different DGM",
        "pop1": "apparent/same DGM",
        "pop2": "apparent/different DGM",
        "boot632plus": "adjusted/development",
        "optimism_corrected": "adjusted/development",
        "V1*": "adjusted/same DGM",
        "V2*": "adjusted/different DGM",
    }
    df = summary[["metric", "setting", "n", "mean", "sd", "mean_sample_ref", "mean_population_ref"]].copy()
    df.insert(0, "panel", df.setting.map(panel))
    df["lower"] = df["mean"] - df["sd"]
    df["upper"] = df["mean"] + df["sd"]
    return df
