"""Command-line entry point: ``oikf {simulate,filter,sweep,fig2,convergence}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from typing import Sequence

from . import dataio
from .baselines import Chi2Config
from .evaluation import (
    DEFAULT_ALPHAS,
    DEFAULT_Q_DB,
    DEFAULT_R_DB,
    NOISY,
    PANELS,
    axis_series,
    compute_metrics,
    convergence_trace_experiment,
    from_db,
    gnss_table,
    mse_vs_r_experiment,
    wide_table,
)
from .filtering import Engine, SingularStepError, filter_series
from .nuv import OikfConfig
from .ssmodel import (
    OutlierSpec,
    SignMode,
    build_position_only_model,
    build_wna_model,
    inject_outliers,
    simulate_trajectory,
)

log = logging.getLogger("oikf")

MODELS = {"wna": build_wna_model, "position": build_position_only_model}
ENGINES = [e.value for e in Engine]


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _require(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def _positive(args, *names):
    for name in names:
        value = getattr(args, name)
        if value is not None:
            _require(math.isfinite(value) and value > 0, name, f"must be a positive number, got {value}")


def _db_grid(text: str, field: str) -> list[float]:
    """``start:stop:step`` (inclusive, dB) or a comma list of dB values."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            _require(step > 0 and stop >= start, field, "expected start:stop:step with step > 0")
            count = int(round((stop - start) / step)) + 1
            values = [start + k * step for k in range(count)]
        else:
            values = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(field, f"cannot parse grid {text!r}") from None
    _require(len(values) > 0 and all(math.isfinite(v) for v in values), field, "grid must be nonempty and finite")
    return values


def _float_list(text: str, field: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(field, f"cannot parse {text!r}") from None


def _oikf_cfg(args) -> OikfConfig:
    _require(args.iters >= 1, "iters", f"must be >= 1, got {args.iters}")
    _require(math.isfinite(args.tol) and args.tol >= 0, "tol", f"must be >= 0, got {args.tol}")
    return OikfConfig(max_iters=args.iters, tol=args.tol, record_trace=getattr(args, "record_trace", False))


def _check_alpha(alpha: float, field: str = "alpha") -> None:
    _require(0.0 < alpha < 1.0, field, f"must lie in (0, 1), got {alpha}")


def _check_outliers(args) -> None:
    _require(0.0 <= args.p <= 1.0, "p", f"must lie in [0, 1], got {args.p}")
    _require(math.isfinite(args.scale) and args.scale > 0, "scale", f"must be positive, got {args.scale}")


def _emit_table(path, rows, columns):
    if path in (None, "-"):
        dataio.write_table(sys.stdout, rows, columns)
    else:
        dataio.write_table(path, rows, columns)


# --- simulate --------------------------------------------------------------

def cmd_simulate(args) -> int:
    _positive(args, "q_var", "r_var", "dt")
    _require(args.T >= 1, "T", f"must be >= 1, got {args.T}")
    _check_outliers(args)
    model = MODELS[args.model](args.q_var, args.r_var, args.dt)
    x0 = _float_list(args.x0, "x0")
    _require(len(x0) == model.state_dim, "x0", f"needs {model.state_dim} values, got {len(x0)}")

    series = simulate_trajectory(model, x0, args.T, seed=args.data_seed, dt=args.dt)
    spec = OutlierSpec(args.p, args.scale, SignMode(args.sign_mode), seed=args.outlier_seed)
    series = inject_outliers(series, spec)
    dataio.write_trajectory(series, args.out)
    print(f"T={len(series)} outliers={int(series.outlier_mask.sum())} out={args.out}")
    return 0


# --- filter ----------------------------------------------------------------

def _engine_cfg(engine: Engine, args):
    if engine is Engine.CHI2:
        _check_alpha(args.alpha)
        return Chi2Config(alpha=args.alpha)
    if engine is Engine.KF:
        return None
    return _oikf_cfg(args)


def cmd_filter(args) -> int:
    _positive(args, "q_var", "r_var", "dt")
    engine = Engine(args.engine)
    cfg = _engine_cfg(engine, args)
    series = dataio.read_trajectory(args.input)
    model_fn = MODELS[args.model]
    if args.axis is not None:
        _require(1 <= args.axis <= series.obs_dim, "axis", f"must lie in 1..{series.obs_dim}")
        series = axis_series(series, args.axis - 1)
    dt = args.dt or series.dt or 1.0
    model = model_fn(args.q_var, args.r_var, dt)
    _require(series.obs_dim == model.obs_dim, "model",
             f"{args.model} model observes {model.obs_dim} dims, file has {series.obs_dim}"
             + ("; pick one with --axis" if args.model == "position" else ""))

    result = filter_series(series, model, engine, cfg)

    m, n = model.state_dim, model.obs_dim
    est_rows = []
    for t in range(len(series)):
        row = {"t": series.times[t]}
        row.update({f"x_{i + 1}": result.means[t, i] for i in range(m)})
        row.update({f"var_{i + 1}": result.covs[t, i, i] for i in range(m)})
        est_rows.append(row)
    est_cols = ["t"] + [f"x_{i + 1}" for i in range(m)] + [f"var_{i + 1}" for i in range(m)]
    dataio.write_table(args.out_estimates, est_rows, est_cols)

    diag_cols = (["t"] + [f"gamma_sq_{k + 1}" for k in range(n)] + [f"nu_sq_{k + 1}" for k in range(n)]
                 + ["iters"] + [f"detected_{k + 1}" for k in range(n)])
    if result.gamma_trace is not None:
        diag_cols += [f"trace_{i + 1}_{k + 1}" for i in range(cfg.max_iters) for k in range(n)]
    diag_rows = []
    for t in range(len(series)):
        row = {"t": series.times[t], "iters": int(result.iters_used[t])}
        for k in range(n):
            row[f"gamma_sq_{k + 1}"] = result.gamma_sq[t, k]
            row[f"nu_sq_{k + 1}"] = result.nu_sq[t, k]
            row[f"detected_{k + 1}"] = bool(result.detected[t, k])
        if result.gamma_trace is not None:
            for i in range(cfg.max_iters):
                for k in range(n):
                    row[f"trace_{i + 1}_{k + 1}"] = result.gamma_trace[t, i, k]
        diag_rows.append(row)
    if args.out_diagnostics:
        dataio.write_table(args.out_diagnostics, diag_rows, diag_cols)

    if series.truth_states is not None and len(series):
        timings = None if args.no_timing else result.step_times
        params = {"q_var": args.q_var, "r_var": args.r_var, "dt": dt}
        if engine is Engine.CHI2:
            params["alpha"] = args.alpha
        elif engine is not Engine.KF:
            params.update(max_iters=args.iters, tol=args.tol)
        rep = compute_metrics(result, series.truth_states, (0,), timings, engine.value, params)
        runtime_ms = None if math.isnan(rep.mean_step_runtime) else 1e3 * rep.mean_step_runtime
        print(json.dumps({
            "engine": rep.engine,
            "params": rep.params,
            "n_steps": rep.n_steps,
            "eval_dims": list(rep.eval_dims),
            "rmse_per_dim": [float(v) for v in rep.rmse_per_dim],
            "mse_db_per_dim": [float(v) for v in rep.mse_db_per_dim],
            "mean_step_runtime_ms": runtime_ms,
            "detected_steps": int(result.detected.any(axis=1).sum()),
        }, sort_keys=True))
    return 0


# --- sweep -----------------------------------------------------------------

def cmd_sweep(args) -> int:
    engines = [e.strip() for e in args.engines.split(",") if e.strip()]
    for name in engines:
        _require(name == NOISY or name in ENGINES, "engines",
                 f"unknown engine {name!r}; choose from {[NOISY] + ENGINES}")
    q_grid = [from_db(v) for v in _db_grid(args.q_db, "q-db")]
    r_grid = [from_db(v) for v in _db_grid(args.r_db, "r-db")]
    alphas = _float_list(args.alphas, "alphas")
    for a in alphas:
        _check_alpha(a, "alphas")
    cfg = _oikf_cfg(args)
    _positive(args, "dt")

    series = dataio.read_trajectory(args.input)
    _require(series.truth_states is not None, "input", "sweep needs ground-truth columns")
    names = args.axis_names.split(",") if args.axis_names else [f"axis{k + 1}" for k in range(series.obs_dim)]
    _require(len(names) == series.obs_dim, "axis-names", f"needs {series.obs_dim} names, got {len(names)}")

    rows, sweeps = gnss_table(series, engines, q_grid, r_grid, alphas, names, args.dt, cfg,
                              timing=not args.no_timing)
    _emit_table(args.out, rows, dataio.RESULT_COLUMNS + ("alpha",))

    if args.out_grid:
        grid_rows = []
        for (engine, axis), sweep in sweeps.items():
            for i, (point, rep) in enumerate(zip(sweep.grid, sweep.reports)):
                grid_rows.append({
                    "engine": engine,
                    "dim": axis,
                    "q_var": point[0],
                    "r_var": point[1],
                    "alpha": point[2] if len(point) > 2 else math.nan,
                    "rmse": float(rep.rmse_per_dim[0]),
                    "mse_db": float(rep.mse_db_per_dim[0]),
                    "best": i == sweep.best,
                })
        dataio.write_table(args.out_grid, grid_rows,
                           ("engine", "dim", "q_var", "r_var", "alpha", "rmse", "mse_db", "best"))

    if args.out is not None and args.out != "-":
        header, lines = wide_table(rows, names)
        print(_render(header, lines, timing=not args.no_timing))
    return 0


def _render(header, lines, timing=True) -> str:
    def fmt(v):
        if isinstance(v, str):
            return v
        return "-" if (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"

    if not timing:
        header, lines = header[:-1], [line[:-1] for line in lines]
    table = [header] + [[fmt(v) for v in line] for line in lines]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in table)


# --- fig2 ------------------------------------------------------------------

def cmd_fig2(args) -> int:
    if args.panel == "custom":
        _check_outliers(args)
        spec = OutlierSpec(args.p, args.scale, SignMode(args.sign_mode)) if args.p > 0 else None
    else:
        spec = PANELS[args.panel]
    _require(args.trials >= 1, "trials", f"must be >= 1, got {args.trials}")
    _require(args.T >= 1, "T", f"must be >= 1, got {args.T}")
    _positive(args, "q_var", "dt")
    r_db = _db_grid(args.r_db, "r-db")
    alphas = _float_list(args.alphas, "alphas")
    for a in alphas:
        _check_alpha(a, "alphas")
    engines = [e.strip() for e in args.engines.split(",")]
    for name in engines:
        _require(name in ENGINES, "engines", f"unknown engine {name!r}")
    cfg = _oikf_cfg(args)

    rows = mse_vs_r_experiment(
        [from_db(v) for v in r_db], spec, engines, T=args.T, n_trials=args.trials,
        q_var=args.q_var, dt=args.dt, data_seed=args.data_seed, outlier_seed=args.outlier_seed,
        alpha_grid=alphas, oikf_cfg=cfg,
    )
    for row, value in zip(rows, r_db * len(engines)):
        row["r2_db"] = value
    _emit_table(args.out, rows, ("engine", "r2_db", "mse_db", "alpha"))
    return 0


# --- convergence -----------------------------------------------------------

def cmd_convergence(args) -> int:
    _check_outliers(args)
    _positive(args, "q_var", "r_var", "dt")
    _require(args.T >= 1, "T", f"must be >= 1, got {args.T}")
    _require(args.engine in ("OIKF-AM", "OIKF-EM"), "engine", "must be OIKF-AM or OIKF-EM")
    cfg = _oikf_cfg(args)
    res = convergence_trace_experiment(
        args.scale, args.p, args.engine, T=args.T, q_var=args.q_var, r_var=args.r_var, dt=args.dt,
        data_seed=args.data_seed, outlier_seed=args.outlier_seed, cfg=cfg,
    )
    rows = []
    for (t, k), trace, its in zip(res.steps, res.traces, res.iterations):
        for i, g in enumerate(trace):
            rows.append({"step": t + 1, "dim": k + 1, "iteration": i + 1, "gamma_sq": g,
                         "iters_to_stability": int(its)})
    if args.out:
        dataio.write_table(args.out, rows, ("step", "dim", "iteration", "gamma_sq", "iters_to_stability"))
    median = res.median_iterations
    print(json.dumps({
        "engine": args.engine,
        "scale": args.scale,
        "p": args.p,
        "detected": len(res.traces),
        "median_iterations_to_stability": None if math.isnan(median) else median,
    }, sort_keys=True))
    return 0


# --- parser ----------------------------------------------------------------

def _add_model_args(p, q_default=0.1, r_default=1.0, dt_default=1.0, model_default="wna"):
    p.add_argument("--model", choices=sorted(MODELS), default=model_default)
    p.add_argument("--q-var", type=float, default=q_default, help="process-noise variance q^2")
    p.add_argument("--r-var", type=float, default=r_default, help="observation-noise variance r^2")
    p.add_argument("--dt", type=float, default=dt_default, help="sampling interval [s]")


def _add_oikf_args(p):
    p.add_argument("--iters", type=int, default=10, help="max inner iterations I")
    p.add_argument("--tol", type=float, default=1e-6, help="relative gamma^2 change for early exit")


def _add_outlier_args(p, p_default=0.0, scale_default=30.0):
    p.add_argument("--p", type=float, default=p_default, help="outlier probability per entry")
    p.add_argument("--scale", type=float, default=scale_default, help="Rayleigh scale of outlier magnitudes")
    p.add_argument("--sign-mode", choices=[s.value for s in SignMode], default="symmetric")


def _add_seeds(p):
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--outlier-seed", type=int, default=10_000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oikf", description="Outlier-insensitive Kalman filtering toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trajectory file")
    _add_model_args(p)
    _add_outlier_args(p)
    _add_seeds(p)
    p.add_argument("--T", type=int, default=1000, help="number of steps")
    p.add_argument("--x0", default="0,0", help="initial state, comma separated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="filter a trajectory file")
    p.add_argument("--input", required=True)
    p.add_argument("--engine", choices=ENGINES, default="OIKF-AM")
    _add_model_args(p, dt_default=None)
    _add_oikf_args(p)
    p.add_argument("--alpha", type=float, default=0.05, help="CHI2 significance level")
    p.add_argument("--axis", type=int, help="filter only this observation column (1-based)")
    p.add_argument("--record-trace", action="store_true", help="add per-iteration gamma^2 columns")
    p.add_argument("--out-estimates", required=True)
    p.add_argument("--out-diagnostics")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock runtime from the output")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("sweep", help="grid-search every engine per axis and emit the error table")
    p.add_argument("--input", required=True)
    p.add_argument("--engines", default=",".join([NOISY, "KF", "CHI2", "OIKF-AM", "OIKF-EM"]))
    p.add_argument("--q-db", default=f"{DEFAULT_Q_DB[0]}:{DEFAULT_Q_DB[-1]}:5")
    p.add_argument("--r-db", default=f"{DEFAULT_R_DB[0]}:{DEFAULT_R_DB[-1]}:2")
    p.add_argument("--alphas", default=",".join(str(a) for a in DEFAULT_ALPHAS))
    p.add_argument("--axis-names", help="comma separated names of the observation columns")
    p.add_argument("--dt", type=float, default=None)
    _add_oikf_args(p)
    p.add_argument("--out", help="tidy table CSV (default stdout)")
    p.add_argument("--out-grid", help="every grid point with the best one marked")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fig2", help="position MSE against r^2 for each engine")
    p.add_argument("--panel", choices=sorted(PANELS) + ["custom"], default="clean")
    _add_outlier_args(p, p_default=0.2)
    p.add_argument("--engines", default="KF,OIKF-AM,OIKF-EM,CHI2")
    p.add_argument("--r-db", default="-10:30:5")
    p.add_argument("--q-var", type=float, default=0.1)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--alphas", default=",".join(str(a) for a in DEFAULT_ALPHAS))
    _add_seeds(p)
    _add_oikf_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fig2)

    p = sub.add_parser("convergence", help="gamma^2 iteration traces on detected outliers")
    p.add_argument("--engine", default="OIKF-AM")
    _add_outlier_args(p, p_default=0.2)
    p.add_argument("--q-var", type=float, default=0.1)
    p.add_argument("--r-var", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--T", type=int, default=1000)
    _add_seeds(p)
    _add_oikf_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_convergence)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"oikf {args.command}: invalid {exc}", file=sys.stderr)
        return 2
    except dataio.TrajectoryFormatError as exc:
        print(f"oikf {args.command}: {exc}", file=sys.stderr)
        return 1
    except SingularStepError as exc:
        print(f"oikf {args.command}: filter failed at time index {exc.time_index}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"oikf {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
