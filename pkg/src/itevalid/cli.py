"""Command-line interface.

Subcommands::

    itevalid fit       --data trial.csv --model-out model.json --predictions-out preds.csv
    itevalid validate  --data trial.csv --mode apparent|internal|external [--model model.json] [--local-refit]
    itevalid simulate  --preset paper-desk --out-dir results/
    itevalid report    --records results/records.csv --out-dir tables/

Exit status is 0 on success, 1 when a computation or input error occurs and
2 on a usage error. Outputs of a failed command are removed.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .data import DataValidationError
from .glm import DesignSpec, fit_ite_model, predict_potential_risks
from .io import (
    InputError,
    TrialSchema,
    emit_report,
    emit_table,
    load_config,
    load_model,
    load_trial_csv,
    save_model,
    write_predictions_csv,
    write_records,
)
from .matching import MatchingError
from .resampling import LOCAL_REFIT, NAIVE, ValidationPlan, evaluate_metrics, external_validate, internal_validate
from .simulation import PRESETS, SimulationResult, performance_summary, plot_data, run_study

log = logging.getLogger("itevalid")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class _Outputs:
    """Files written by the current command, removed again if it fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def remove(self):
        for p in self.paths:
            if p.exists():
                p.unlink()


def _schema(args, cfg) -> TrialSchema:
    base = TrialSchema.from_dict(cfg.get("data", {}))
    cov = base.covariates
    if args.covariates:
        cov = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    return TrialSchema(args.outcome or base.outcome, args.treatment or base.treatment, cov, base.outcome_kind)


def _load(args, cfg):
    d, names = load_trial_csv(args.data, _schema(args, cfg))
    log.info("loaded %d rows (%d treated, %d control), %d covariates", d.n, d.treated.size, d.controls.size, d.p)
    return d, names


def cmd_fit(args, cfg, out: _Outputs) -> None:
    d, names = _load(args, cfg)
    fit = fit_ite_model(d, DesignSpec(d.p, True, names))
    if not fit.converged:
        log.warning("model fit did not converge after %d iterations", fit.iterations)
    save_model(out.add(args.model_out), fit)
    if args.predictions_out:
        write_predictions_csv(out.add(args.predictions_out), predict_potential_risks(fit, d.X))


def _plan(args, cfg) -> ValidationPlan:
    v = dict(cfg.get("validation", {}))
    kw = {}
    for key in ("B", "seed", "repeats", "inner_repeats"):
        val = getattr(args, key, None)
        if val is None:
            val = v.get(key)
        if val is not None:
            kw[key] = int(val)
    if args.stratified or v.get("stratified"):
        kw["stratified"] = True
    if v.get("metrics"):
        kw["metrics"] = tuple(v["metrics"])
    return ValidationPlan(**kw)


def cmd_validate(args, cfg, out: _Outputs) -> None:
    d, names = _load(args, cfg)
    plan = _plan(args, cfg)
    spec = DesignSpec(d.p, True, names)
    extra = {"data": {"n": d.n, "treated": int(d.treated.size), "controls": int(d.controls.size)}, "mode": args.mode}
    if args.mode == "external":
        if not args.model:
            raise InputError("--mode external needs --model")
        model = load_model(args.model)
        if tuple(model.spec.names) != tuple(names):
            raise InputError(f"model covariates {list(model.spec.names)} do not match data columns {list(names)}")
        mode = LOCAL_REFIT if args.local_refit else NAIVE
        est = list(external_validate(model, d, mode, metrics=plan.metrics, repeats=plan.repeats, seed=plan.seed).values())
        extra["external_mode"] = mode
    elif args.mode == "internal":
        iv = internal_validate(d, spec, plan)
        est = iv.estimates()
        extra["bootstrap"] = {"B": iv.B, "dropped_fit": iv.dropped_fit, "dropped_oos": iv.dropped_oos}
    else:
        model = load_model(args.model) if args.model else fit_ite_model(d, spec)
        preds = predict_potential_risks(model, d.X)
        est = list(evaluate_metrics(d, preds, metrics=plan.metrics, repeats=plan.repeats, seed=plan.seed).values())
    config = {"plan": dataclasses.asdict(plan), "mode": args.mode, "local_refit": bool(args.local_refit)}
    emit_report(out.add(args.out), est, "json", seed=plan.seed, config=config, extra=extra)
    if args.tsv:
        emit_report(out.add(args.tsv), est, "tsv", seed=plan.seed, config=config)


def _study_config(args, cfg):
    sim = dict(cfg.get("simulation", {}))
    preset = args.preset or sim.pop("preset", "paper-desk")
    sim.pop("preset", None)
    if preset not in PRESETS:
        raise InputError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    overrides = {k: v for k, v in sim.items()}
    for key in ("n_sim", "B", "seed", "n_population", "repeats", "v2_size"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.sample_sizes:
        overrides["sample_sizes"] = tuple(int(s) for s in args.sample_sizes.split(","))
    for key in ("sample_sizes", "bootstrap_sizes"):
        if overrides.get(key) is not None:
            overrides[key] = tuple(int(s) for s in overrides[key])
    if args.no_bootstrap:
        overrides["bootstrap"] = False
    valid = {f.name for f in dataclasses.fields(PRESETS[preset])}
    unknown = set(overrides) - valid
    if unknown:
        raise InputError(f"unknown simulation settings {sorted(unknown)}")
    return preset, dataclasses.replace(PRESETS[preset], **overrides)


def _write_study(out_dir: Path, result: SimulationResult, out: _Outputs, preset: Optional[str] = None) -> None:
    summary = performance_summary(result)
    # full-precision records so that `report` reproduces the summary exactly
    write_records(out.add(out_dir / "records.csv"), result.records)
    emit_table(out.add(out_dir / "records.tsv"), result.records)
    emit_table(out.add(out_dir / "summary.tsv"), summary)
    emit_table(out.add(out_dir / "plot_data.tsv"), plot_data(summary))
    config = result.config.to_dict()
    if preset:
        config["preset"] = preset
    extra = {"failures": result.failures, "runs": int(result.records.run.nunique()) if len(result.records) else 0}
    emit_report(out.add(out_dir / "report.json"), [], "json", seed=result.config.seed, config=config, extra={**extra, "summary": summary.to_dict(orient="records")})


def cmd_simulate(args, cfg, out: _Outputs) -> None:
    preset, config = _study_config(args, cfg)
    log.info("running study: %d runs x sizes %s", config.n_sim, list(config.sample_sizes))

    def progress(k, total):
        if k % 10 == 0 or k == total:
            log.info("%d/%d cells done", k, total)

    result = run_study(config, n_jobs=args.jobs, progress=progress)
    if result.failures:
        log.warning("%d runs failed and were excluded", len(result.failures))
    _write_study(Path(args.out_dir), result, out, preset)


def cmd_report(args, cfg, out: _Outputs) -> None:
    path = Path(args.records)
    try:
        records = pd.read_csv(path, sep="\t" if path.suffix == ".tsv" else ",", na_values=["NA"])
    except (OSError, pd.errors.ParserError) as exc:
        raise InputError(f"{path}: {exc}") from None
    need = {"run", "n", "setting", "metric", "estimate", "population_ref"}
    if not need <= set(records.columns):
        raise InputError(f"{path}: missing columns {sorted(need - set(records.columns))}")
    summary = performance_summary(records)
    out_dir = Path(args.out_dir)
    emit_table(out.add(out_dir / "summary.tsv"), summary)
    emit_table(out.add(out_dir / "plot_data.tsv"), plot_data(summary))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itevalid", description="Validation of individualized treatment effect models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{fit,validate,simulate,report}")

    def data_args(sp):
        sp.add_argument("--data", required=True, help="trial CSV with header row")
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--outcome", help="outcome column (default y)")
        sp.add_argument("--treatment", help="treatment column, values 0/1 (default a)")
        sp.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")

    sp = sub.add_parser("fit", help="fit the ITE logistic model")
    data_args(sp)
    sp.add_argument("--model-out", required=True)
    sp.add_argument("--predictions-out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("validate", help="apparent, internal (bootstrap) or external validation")
    data_args(sp)
    sp.add_argument("--mode", choices=("apparent", "internal", "external"), default="apparent")
    sp.add_argument("--model", help="fitted model JSON (required for external)")
    sp.add_argument("--local-refit", action="store_true", help="external: refit control/outcome models on the validation data")
    sp.add_argument("--B", type=int, help="bootstrap replicates")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--repeats", type=int, help="arm subsampling repeats for matched statistics")
    sp.add_argument("--inner-repeats", dest="inner_repeats", type=int)
    sp.add_argument("--stratified", action="store_true", help="resample within treatment arms")
    sp.add_argument("--out", required=True, help="JSON report path")
    sp.add_argument("--tsv", help="optional TSV copy of the estimates")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="run the simulation study")
    sp.add_argument("--config", help="YAML config file")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--n-sim", dest="n_sim", type=int)
    sp.add_argument("--sample-sizes", help="comma-separated development sample sizes")
    sp.add_argument("--v2-size", dest="v2_size", type=int)
    sp.add_argument("--n-population", dest="n_population", type=int)
    sp.add_argument("--B", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--no-bootstrap", action="store_true")
    sp.add_argument("--jobs", type=int, help="worker processes (default: $ITEVALID_THREADS or 1)")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="aggregate simulation records into summary tables")
    sp.add_argument("--records", required=True, help="records table written by simulate")
    sp.add_argument("--config", help="YAML config file")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    out = _Outputs()
    try:
        cfg = load_config(getattr(args, "config", None))
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            args.func(args, cfg, out)
    except (InputError, DataValidationError, MatchingError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        out.remove()
        print(f"itevalid {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())
