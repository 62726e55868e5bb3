"""File input and report output.

Trials come in as CSV (header row, comma separated, UTF-8, '.' decimal).
Reports go out as JSON documents or tab-separated tables with floats rounded
to 6 significant digits, so the same inputs always give the same bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .data import BINARY, MetricEstimate, RiskPredictionSet, TrialDataset, validate_dataset
from .glm import DesignSpec, LogisticFit

SIG_DIGITS = 6


class InputError(ValueError):
    """Malformed input file or configuration."""


@dataclass(frozen=True)
class TrialSchema:
    """Column mapping; ``covariates=None`` takes every other column in file order."""

    outcome: str = "y"
    treatment: str = "a"
    covariates: Optional[tuple] = None
    outcome_kind: str = BINARY

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrialSchema":
        cov = d.get("covariates")
        if isinstance(cov, str):
            cov = [c.strip() for c in cov.split(",") if c.strip()]
        return cls(
            d.get("outcome", "y"),
            d.get("treatment", "a"),
            None if cov is None else tuple(cov),
            d.get("outcome_kind", BINARY),
        )


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise InputError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise InputError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def load_trial_csv(path, schema: Optional[TrialSchema] = None) -> tuple[TrialDataset, tuple]:
    """Read a trial from CSV. Returns the dataset and the covariate column names.

    Row numbers in error messages count the header as row 1.
    """
    schema = schema or TrialSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    covariates = schema.covariates
    if covariates is None:
        covariates = tuple(h for h in header if h not in (schema.outcome, schema.treatment))
    for col in (schema.outcome, schema.treatment, *covariates):
        if col not in header:
            raise InputError(f"{path}: missing column {col!r}")
    if not rows:
        raise InputError(f"{path}: no data rows")
    pos = {h: k for k, h in enumerate(header)}
    n = len(rows)
    y = np.empty(n)
    a = np.empty(n, dtype=int)
    X = np.empty((n, len(covariates)))
    for i, r in enumerate(rows):
        line = i + 2
        if len(r) != len(header):
            raise InputError(f"row {line}: expected {len(header)} fields, found {len(r)}")
        y[i] = _parse_float(r[pos[schema.outcome]].strip(), line, schema.outcome)
        t = _parse_float(r[pos[schema.treatment]].strip(), line, schema.treatment)
        if t not in (0.0, 1.0):
            raise InputError(f"row {line}, column {schema.treatment!r}: treatment must be 0 or 1, got {r[pos[schema.treatment]]!r}")
        a[i] = int(t)
        for j, c in enumerate(covariates):
            X[i, j] = _parse_float(r[pos[c]].strip(), line, c)
    d = TrialDataset(y, a, X, schema.outcome_kind)
    validate_dataset(d)
    return d, tuple(covariates)


def write_trial_csv(path, d: TrialDataset, covariate_names: Optional[Sequence[str]] = None) -> None:
    """Write a trial with full float precision (shortest round-trip repr)."""
    names = list(covariate_names or [f"x{k + 1}" for k in range(d.p)])
    with _atomic(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "a", *names])
        for i in range(d.n):
            w.writerow([repr(float(d.y[i])), int(d.a[i]), *(repr(float(v)) for v in d.X[i])])


def write_predictions_csv(path, preds: RiskPredictionSet) -> None:
    with _atomic(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "g0", "g1", "delta", "lp0", "lp1", "delta_lp"])
        for i in range(len(preds)):
            w.writerow(
                [i + 1] + [_fmt(v) for v in (preds.g0[i], preds.g1[i], preds.delta[i], preds.lp0[i], preds.lp1[i], preds.delta_lp[i])]
            )


def write_records(path, records: pd.DataFrame) -> None:
    """Simulation records as CSV with round-trip float precision."""
    with _atomic(path) as fh:
        records.to_csv(fh, index=False, na_rep="NA", lineterminator="\n")


# ---------------------------------------------------------------------------
# model files


def model_to_dict(fit: LogisticFit) -> dict:
    spec = fit.spec
    return {
        "terms": list(fit.terms),
        "coefficients": [float(c) for c in fit.coefficients],
        "covariates": list(spec.names),
        "treatment_terms": spec.includes_treatment_terms,
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "deviance": float(fit.deviance),
        "separation": bool(fit.separation),
    }


def model_from_dict(d: Mapping[str, Any]) -> LogisticFit:
    try:
        cov = tuple(d["covariates"])
        spec = DesignSpec(len(cov), bool(d.get("treatment_terms", True)), cov)
        coef = np.asarray(d["coefficients"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed model file: {exc}") from None
    if coef.shape != (len(spec.terms),):
        raise InputError(f"model has {coef.size} coefficients but {len(spec.terms)} terms")
    return LogisticFit(
        coef,
        bool(d.get("converged", True)),
        float(d.get("deviance", float("nan"))),
        int(d.get("iterations", 0)),
        bool(d.get("separation", False)),
        spec,
        float("nan"),
        tuple(spec.terms),
    )


def save_model(path, fit: LogisticFit) -> None:
    # coefficients keep full precision; a model file is an input, not a report
    with _atomic(path) as fh:
        json.dump(model_to_dict(fit), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> LogisticFit:
    try:
        with open(path, encoding="utf-8") as fh:
            return model_from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not a model file ({exc})") from None


# ---------------------------------------------------------------------------
# configuration


CONFIG_SECTIONS = ("data", "model", "validation", "simulation")


def load_config(path) -> dict:
    """Read a YAML config with the flat sections ``data``, ``model``, ``validation``, ``simulation``."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: invalid config ({exc})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a mapping")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise InputError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# reports


def _round(x: float):
    if x is None or not math.isfinite(x):
        return None
    if x == 0:
        return 0.0
    return float(f"{x:.{SIG_DIGITS}g}")


def _fmt(x) -> str:
    r = _round(float(x))
    return "NA" if r is None else f"{r:.{SIG_DIGITS}g}"


def _plain(obj):
    """JSON-ready copy with floats rounded and numpy scalars unwrapped."""
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _round(float(obj))
    return obj


class _atomic:
    """Write to a temp file beside ``path`` and move it into place on success."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.")
        self.fh = os.fdopen(fd, "w", encoding="utf-8", newline="")
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def report_document(estimates: Iterable[MetricEstimate], *, seed=None, config: Optional[Mapping] = None, extra: Optional[Mapping] = None) -> dict:
    config = dict(config or {})
    doc = {
        "software": {"name": "itevalid", "version": __version__},
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
        "estimates": [e.to_dict() for e in estimates],
    }
    if extra:
        doc.update(extra)
    return _plain(doc)


def emit_report(path, estimates: Iterable[MetricEstimate], fmt: str = "json", *, seed=None, config=None, extra=None) -> Path:
    """Write estimates as a JSON report or a TSV table (one row per estimate)."""
    estimates = list(estimates)
    path = Path(path)
    if fmt == "json":
        doc = report_document(estimates, seed=seed, config=config, extra=extra)
        with _atomic(path) as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    elif fmt == "tsv":
        rows = [
            {
                "context": e.context,
                "metric": e.name,
                "value": e.value,
                "estimable": e.estimable,
                "meta": json.dumps(_plain(e.meta), sort_keys=True),
            }
            for e in estimates
        ]
        emit_table(path, pd.DataFrame(rows, columns=["context", "metric", "value", "estimable", "meta"]))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def emit_table(path, df: pd.DataFrame) -> Path:
    """Tab-separated table, floats at 6 significant digits, missing values as NA."""
    path = Path(path)
    out = df.copy()
    for c in out.columns:
        if pd.api.types.is_float_dtype(out[c]):
            out[c] = [_fmt(v) for v in out[c]]
        elif pd.api.types.is_bool_dtype(out[c]):
            out[c] = out[c].map({True: "true", False: "false"})
    with _atomic(path) as fh:
        out.to_csv(fh, sep="\t", index=False, na_rep="NA", lineterminator="\n")
    return path
