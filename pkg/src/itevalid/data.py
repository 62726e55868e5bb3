"""Shared domain types for two-arm trial ITE validation.

Outcome coding: ``Y = 1`` is the harmful event, so a negative predicted
treatment effect (``g1 - g0 < 0``) means predicted benefit. Every metric in
the package derives its sign convention from :data:`EVENT_IS_HARMFUL`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.special import expit, logit

EVENT_IS_HARMFUL = True

PROB_EPS = 1e-12

BINARY = "binary"
CONTINUOUS = "continuous"

METRIC_NAMES = (
    "cben_delta",
    "cben_y0",
    "mbcb",
    "cal_intercept",
    "cal_slope",
    "ate_error",
    "c_outcome",
    "brier",
)
CONCORDANCE_METRICS = ("cben_delta", "cben_y0", "mbcb", "c_outcome")
CONTEXTS = (
    "apparent",
    "boot632plus",
    "optimism_corrected",
    "external",
    "sample_reference",
    "population_reference",
    "naive_reference",
)


class DataValidationError(ValueError):
    """Raised when a dataset violates one of its invariants."""


def clamp_prob(p):
    return np.clip(np.asarray(p, dtype=float), PROB_EPS, 1.0 - PROB_EPS)


def safe_logit(p):
    return logit(clamp_prob(p))


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Outcomes, treatment indicator and covariates of one two-arm study."""

    y: np.ndarray
    a: np.ndarray
    X: np.ndarray
    outcome_kind: str = BINARY

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        a = np.asarray(self.a)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a.reshape(-1))
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.a == 1)

    @property
    def controls(self) -> np.ndarray:
        return np.flatnonzero(self.a == 0)

    def subset(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        return TrialDataset(self.y[idx], self.a[idx], self.X[idx], self.outcome_kind)

    def to_dict(self) -> dict:
        return {
            "y": self.y.tolist(),
            "a": self.a.astype(int).tolist(),
            "X": self.X.tolist(),
            "outcome_kind": self.outcome_kind,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrialDataset":
        X = np.asarray(d["X"], dtype=float)
        if X.size == 0:
            X = X.reshape(len(d["y"]), 0)
        return cls(np.asarray(d["y"], dtype=float), np.asarray(d["a"], dtype=int), X, d["outcome_kind"])


def validate_dataset(d: TrialDataset) -> TrialDataset:
    """Check the dataset invariants and return ``d`` unchanged.

    Raises :class:`DataValidationError` describing the first violation.
    """
    if d.outcome_kind not in (BINARY, CONTINUOUS):
        raise DataValidationError(f"unknown outcome kind {d.outcome_kind!r}")
    if d.X.shape[0] != d.n or d.a.shape[0] != d.n:
        raise DataValidationError(
            f"length mismatch: y has {d.n} rows, a has {d.a.shape[0]}, X has {d.X.shape[0]}"
        )
    if d.n < 2:
        raise DataValidationError("need at least 2 individuals")
    if np.isnan(d.y).any():
        raise DataValidationError("missing value in outcome")
    a = np.asarray(d.a, dtype=float)
    if np.isnan(a).any() or not np.isin(a, (0.0, 1.0)).all():
        raise DataValidationError("treatment indicator must be 0 or 1")
    if not (a == 0).any():
        raise DataValidationError("empty control arm")
    if not (a == 1).any():
        raise DataValidationError("empty treated arm")
    if not np.isfinite(d.X).all():
        bad = np.argwhere(~np.isfinite(d.X))[0]
        raise DataValidationError(f"non-finite covariate at row {bad[0]}, column {bad[1]}")
    if d.outcome_kind == BINARY and not np.isin(d.y, (0.0, 1.0)).all():
        bad = int(np.flatnonzero(~np.isin(d.y, (0.0, 1.0)))[0])
        raise DataValidationError(f"binary outcome required, got {d.y[bad]!r} at row {bad}")
    if d.outcome_kind == CONTINUOUS and not np.isfinite(d.y).all():
        raise DataValidationError("non-finite continuous outcome")
    return d


@dataclass(frozen=True, eq=False)
class RiskPredictionSet:
    """Predicted control risk ``g0``, treated risk ``g1`` and their contrasts."""

    g0: np.ndarray
    g1: np.ndarray
    delta: np.ndarray
    lp0: np.ndarray
    lp1: np.ndarray
    delta_lp: np.ndarray

    @classmethod
    def from_probs(cls, g0, g1) -> "RiskPredictionSet":
        g0 = np.asarray(g0, dtype=float).reshape(-1)
        g1 = np.asarray(g1, dtype=float).reshape(-1)
        if g0.shape != g1.shape:
            raise ValueError("g0 and g1 must have equal length")
        lp0 = safe_logit(g0)
        lp1 = safe_logit(g1)
        return cls(g0, g1, g1 - g0, lp0, lp1, lp1 - lp0)

    @classmethod
    def from_linear_predictors(cls, lp0, lp1) -> "RiskPredictionSet":
        lp0 = np.asarray(lp0, dtype=float).reshape(-1)
        lp1 = np.asarray(lp1, dtype=float).reshape(-1)
        lo, hi = logit(PROB_EPS), logit(1.0 - PROB_EPS)
        lp0c = np.clip(lp0, lo, hi)
        lp1c = np.clip(lp1, lo, hi)
        g0 = expit(lp0)
        g1 = expit(lp1)
        return cls(g0, g1, g1 - g0, lp0c, lp1c, lp1c - lp0c)

    def __len__(self):
        return self.g0.shape[0]

    def subset(self, idx) -> "RiskPredictionSet":
        idx = np.asarray(idx)
        return RiskPredictionSet(
            self.g0[idx], self.g1[idx], self.delta[idx], self.lp0[idx], self.lp1[idx], self.delta_lp[idx]
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("g0", "g1", "delta", "lp0", "lp1", "delta_lp")}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RiskPredictionSet":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("g0", "g1", "delta", "lp0", "lp1", "delta_lp")))


@dataclass(frozen=True)
class MatchedPairSet:
    """1:1 pairs of (control index, treated index)."""

    pairs: tuple[tuple[int, int], ...]
    match_scalar: str
    total_distance: float

    @property
    def controls(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=int)

    @property
    def treated(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=int)

    def __len__(self):
        return len(self.pairs)

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "match_scalar": self.match_scalar,
            "total_distance": self.total_distance,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MatchedPairSet":
        return cls(tuple((int(i), int(j)) for i, j in d["pairs"]), d["match_scalar"], float(d["total_distance"]))


@dataclass(frozen=True)
class MetricEstimate:
    """A named statistic with the context it was evaluated in.

    Non-estimable statistics carry ``value = nan`` and ``estimable = False``;
    ``meta["reason"]`` then says why.
    """

    name: str
    value: float
    context: str = "apparent"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ValueError(f"unknown metric name {self.name!r}")
        if self.context not in CONTEXTS:
            raise ValueError(f"unknown context {self.context!r}")
        v = float(self.value)
        object.__setattr__(self, "value", v)
        if np.isfinite(v) and self.name in CONCORDANCE_METRICS and not (-1e-12 <= v <= 1 + 1e-12):
            raise ValueError(f"{self.name} must lie in [0, 1], got {v}")

    @property
    def estimable(self) -> bool:
        return bool(np.isfinite(self.value))

    @classmethod
    def non_estimable(cls, name: str, context: str = "apparent", reason: str = "", **meta) -> "MetricEstimate":
        return cls(name, float("nan"), context, {"reason": reason, **meta})

    def with_context(self, context: str, **meta) -> "MetricEstimate":
        return MetricEstimate(self.name, self.value, context, {**self.meta, **meta})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value if self.estimable else None,
            "context": self.context,
            "estimable": self.estimable,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricEstimate":
        v = d["value"]
        return cls(d["name"], float("nan") if v is None else float(v), d["context"], dict(d.get("meta", {})))


@dataclass(frozen=True, eq=False)
class PopulationWithTruth:
    """Simulated population with both potential outcomes and their probabilities."""

    X: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    a: np.ndarray

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def y(self) -> np.ndarray:
        return np.where(self.a == 1, self.y1, self.y0)

    @property
    def truth(self) -> RiskPredictionSet:
        return RiskPredictionSet.from_probs(self.p0, self.p1)

    def trial(self, idx=None) -> TrialDataset:
        """Observed trial data (consistency: y equals the potential outcome of the assigned arm)."""
        if idx is None:
            idx = np.arange(self.N)
        idx = np.asarray(idx)
        return TrialDataset(self.y[idx].astype(float), self.a[idx], self.X[idx])

    def subset(self, idx) -> "PopulationWithTruth":
        idx = np.asarray(idx)
        return PopulationWithTruth(self.X[idx], self.p0[idx], self.p1[idx], self.y0[idx], self.y1[idx], self.a[idx])

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(),
            "p0": self.p0.tolist(),
            "p1": self.p1.tolist(),
            "y0": self.y0.astype(int).tolist(),
            "y1": self.y1.astype(int).tolist(),
            "a": self.a.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PopulationWithTruth":
        return cls(
            np.asarray(d["X"], dtype=float),
            np.asarray(d["p0"], dtype=float),
            np.asarray(d["p1"], dtype=float),
            np.asarray(d["y0"], dtype=int),
            np.asarray(d["y1"], dtype=int),
            np.asarray(d["a"], dtype=int),
        )
