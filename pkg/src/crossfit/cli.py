"""Command line interface: fit, simulate, validate.

Exit codes:
    0  success (possibly with warnings, e.g. variance at the floor)
    1  validation suite failure
    2  data errors (unreadable CSV, unbalanced design, bad covariates)
    3  fit did not converge
    4  configuration errors
    5  too many simulation replicates failed
"""
from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np
import pandas as pd

from . import oracle
from .design import (
    CovariateSet,
    classify_covariates,
    decompose_covariate,
    grid_from_table,
    validate_design,
)
from .errors import (
    BadIndex,
    ConfigError,
    CrossfitError,
    DimensionMismatch,
    DuplicateCell,
    EmptyData,
    InvalidMixture,
    LevelViolation,
    MissingCell,
    NoConvergence,
    NonPositiveLambda,
    SingularDesign,
    TooManyFailures,
)
from .estimate import fit_ml
from .inference import confidence_intervals, fhat, fit_residuals, residual_moments
from .reml import fit_reml, reml_criterion
from .simulate import SimConfig, SimReport, run_study
from .covariance import VarianceComponents

SCHEMA_VERSION = "1"

DATA_ERRORS = (
    EmptyData, MissingCell, DuplicateCell, BadIndex, LevelViolation,
    DimensionMismatch, SingularDesign, NonPositiveLambda,
)

CSV_HEADER = "Estimate,g,h,m,Cvge,Len"


def _err(msg: str) -> None:
    print(f"crossfit: error: {msg}", file=sys.stderr)


def _warn(msg: str) -> None:
    print(f"crossfit: warning: {msg}", file=sys.stderr)


def _jsonable(value):
    """Replace NaN/inf with None recursively so the JSON stays strict."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if math.isfinite(f) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _write_json(payload: dict, path: str | None) -> None:
    text = json.dumps(_jsonable(payload), indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _split_cols(raw: str | None) -> list[str]:
    if not raw:
        return []
    return [c.strip() for c in raw.split(",") if c.strip()]


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _append_decomposed(cov: CovariateSet, table, design, names: list[str]) -> CovariateSet:
    row, col = cov.row, cov.col
    inter, within = cov.inter, cov.within
    set_names = {lv: list(v) for lv, v in cov.names.items()}
    for name in names:
        grid = grid_from_table(table, design, name)
        parts = decompose_covariate(grid, design)
        row = np.concatenate([row, parts.row[:, None]], axis=1)
        col = np.concatenate([col, parts.col[:, None]], axis=1)
        inter = np.concatenate([inter, parts.inter[:, :, None]], axis=2)
        within = np.concatenate([within, parts.within[:, :, :, None]], axis=3)
        set_names["row"].append(f"{name}.row")
        set_names["column"].append(f"{name}.col")
        set_names["interaction"].append(f"{name}.inter")
        set_names["within"].append(f"{name}.within")
    return CovariateSet(row=row, col=col, inter=inter, within=within, names=set_names)


def cmd_fit(args) -> int:
    try:
        table = pd.read_csv(args.data)
    except FileNotFoundError:
        _err(f"no such file: {args.data}")
        return 2
    except pd.errors.ParserError as exc:
        _err(f"malformed CSV: {exc}")
        return 2

    declarations = {}
    for raw, level in (
        (args.row_cols, "row"),
        (args.col_cols, "column"),
        (args.inter_cols, "interaction"),
        (args.within_cols, "within"),
    ):
        for name in _split_cols(raw):
            declarations[name] = level
    decompose_names = _split_cols(args.decompose)

    used = ["i", "j", "k", "y"] + list(declarations) + decompose_names
    for name in used:
        if name not in table.columns:
            _err(f"column {name!r} not in {args.data}")
            return 2
    if table[used].isna().any().any():
        bad = table[used].isna().any()
        _err(f"missing values in columns {sorted(bad[bad].index.tolist())}")
        return 2

    try:
        design = validate_design(table)
        cov = classify_covariates(table, design, declarations)
        cov = _append_decomposed(cov, table, design, decompose_names)
        y = grid_from_table(table, design, "y")
        from .design import compress

        stats = compress(design, cov, y)
    except DATA_ERRORS as exc:
        _err(str(exc))
        return 2

    fitter = fit_reml if args.method == "reml" else fit_ml
    try:
        fit = fitter(stats)
    except NoConvergence as exc:
        _err(str(exc))
        if exc.best is not None:
            _err(
                "best iterate: loglik "
                f"{exc.best.loglik:.6f} after {exc.best.iterations} iterations"
            )
        return 3
    except DATA_ERRORS as exc:
        _err(str(exc))
        return 2

    warnings = []
    if fit.boundary:
        warnings.append(
            f"variance components at the floor: {', '.join(fit.boundary)}; "
            "asymptotic intervals are not reliable there"
        )

    residuals = fit_residuals(y, cov, fit.params, design)
    moments = residual_moments(residuals, design)
    cov_est = fhat(fit, moments, on_boundary="ignore")
    table_ci = confidence_intervals(fit, cov_est, level=args.level)
    warnings.extend(table_ci.warnings)

    names = {
        "row": cov.names["row"], "column": cov.names["column"],
        "interaction": cov.names["interaction"], "within": cov.names["within"],
    }
    report = {
        "schema_version": SCHEMA_VERSION,
        "method": fit.method,
        "design": {"g": design.g, "h": design.h, "m": design.m, "n": design.n},
        "covariates": names,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "score_norm": fit.score_norm,
        "loglik": fit.loglik,
        "criterion": fit.criterion,
        "boundary": list(fit.boundary),
        "level": args.level,
        "estimates": table_ci.to_records(),
        "moments": {
            "mu3_alpha": moments.mu3_alpha,
            "mu4_alpha": moments.mu4_alpha,
            "mu3_beta": moments.mu3_beta,
            "mu4_beta": moments.mu4_beta,
            "mu4_gamma": moments.mu4_gamma,
            "mu4_e": moments.mu4_e,
        },
        "warnings": warnings,
    }
    if fit.method == "reml":
        report["reml_criterion"] = reml_criterion(fit.params, stats)
    _write_json(report, args.out)
    for w in warnings:
        _warn(w)
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

TABLE_GRID = [(g, h, m) for m in (10, 30) for h in (10, 50) for g in (10, 50)]

MIXTURE_DISTS = {"alpha": "normal", "beta": "mixture", "gamma": "normal", "e": "mixture"}


def _preset_config(preset: str, g: int, h: int, m: int, reps: int, seed: int,
                   method: str, level: float) -> SimConfig:
    dists = {s: "normal" for s in ("alpha", "beta", "gamma", "e")}
    if preset == "table2-cell":
        dists = dict(MIXTURE_DISTS)
    return SimConfig(
        g=g, h=h, m=m, replicates=reps, seed=seed,
        dists=dists, method=method, level=level,
    )


def cmd_simulate(args) -> int:
    try:
        configs = []
        if args.config:
            try:
                with open(args.config) as fh:
                    raw = json.load(fh)
            except FileNotFoundError:
                _err(f"no such file: {args.config}")
                return 4
            except json.JSONDecodeError as exc:
                _err(f"bad JSON in {args.config}: {exc}")
                return 4
            configs.append(SimConfig.from_dict(raw))
        elif args.preset:
            if args.g is None or args.h is None or args.m is None:
                _err("--preset needs --g, --h and --m")
                return 4
            configs.append(
                _preset_config(args.preset, args.g, args.h, args.m,
                               args.reps, args.seed, args.method, args.level)
            )
        elif args.table1 or args.table2:
            preset = "table1-cell" if args.table1 else "table2-cell"
            for g, h, m in TABLE_GRID:
                configs.append(
                    _preset_config(preset, g, h, m, args.reps, args.seed,
                                   args.method, args.level)
                )
        else:
            _err("one of --preset, --config, --table1, --table2 is required")
            return 4
        for cfg in configs:
            cfg.validate()
    except (ConfigError, InvalidMixture) as exc:
        _err(str(exc))
        return 4

    reports: list[SimReport] = []
    try:
        for cfg in configs:
            reports.append(run_study(cfg))
    except TooManyFailures as exc:
        _err(str(exc))
        return 5
    except (ConfigError, InvalidMixture) as exc:
        _err(str(exc))
        return 4

    csv_lines = [CSV_HEADER]
    for rep in reports:
        csv_lines.extend(rep.csv_rows())
    csv_text = "\n".join(csv_lines) + "\n"
    if args.out_csv:
        with open(args.out_csv, "w") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)

    if args.out_json:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "studies": [rep.to_dict() for rep in reports],
        }
        _write_json(payload, args.out_json)
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    checks = oracle.run_validation(args.seed, args.instances)
    failed = False
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{c.name}: max_err={c.max_err:.3e} tol={c.tol:.0e} {status}")
        failed = failed or not c.passed
    print(f"validation {'FAILED' if failed else 'passed'} "
          f"({args.instances} instances, seed {args.seed})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfit",
        description="Balanced two-way crossed mixed models: fit, simulate, validate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one dataset from a CSV file")
    p_fit.add_argument("--data", required=True, help="CSV with columns i,j,k,y,...")
    p_fit.add_argument("--method", choices=("ml", "reml"), default="reml")
    p_fit.add_argument("--row-cols", help="comma-separated row-level covariates")
    p_fit.add_argument("--col-cols", help="comma-separated column-level covariates")
    p_fit.add_argument("--inter-cols", help="comma-separated interaction-level covariates")
    p_fit.add_argument("--within-cols", help="comma-separated within-level covariates")
    p_fit.add_argument(
        "--decompose",
        help="comma-separated covariates to split into row/col/inter/within parts",
    )
    p_fit.add_argument("--level", type=float, default=0.95)
    p_fit.add_argument("--out", help="write the JSON report here instead of stdout")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run a coverage study")
    p_sim.add_argument("--preset", choices=("table1-cell", "table2-cell"))
    p_sim.add_argument("--config", help="JSON file with a full study configuration")
    p_sim.add_argument("--table1", action="store_true",
                       help="all-normal study over the full size grid")
    p_sim.add_argument("--table2", action="store_true",
                       help="mixture column/error study over the full size grid")
    p_sim.add_argument("--g", type=int)
    p_sim.add_argument("--h", type=int)
    p_sim.add_argument("--m", type=int)
    p_sim.add_argument("--reps", type=int, default=1000)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--method", choices=("ml", "reml"), default="reml")
    p_sim.add_argument("--level", type=float, default=0.95)
    p_sim.add_argument("--out-csv", help="write coverage rows here (default stdout)")
    p_sim.add_argument("--out-json", help="also write the full JSON report here")
    p_sim.set_defaults(func=cmd_simulate)

    p_val = sub.add_parser("validate", help="cross-check structured vs dense paths")
    p_val.add_argument("--seed", type=int, default=0)
    p_val.add_argument("--instances", type=int, default=20)
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CrossfitError as exc:
        # anything not already mapped: treat as a data/model error
        _err(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
