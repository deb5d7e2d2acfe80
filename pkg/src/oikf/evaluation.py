"""Metrics, grid search and the experiment drivers behind the result tables."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baselines import Chi2Config, chi2_threshold
from .filtering import Engine, FilterResult, SingularStepError, filter_batch, filter_series
from .kalman import GaussianBelief
from .nuv import OikfConfig, relative_change
from .ssmodel import (
    ObservationSeries,
    OutlierSpec,
    SystemModel,
    build_position_only_model,
    build_wna_model,
    inject_outliers,
    simulate_trajectory,
    stack_models,
)

log = logging.getLogger(__name__)

__all__ = [
    "MSE_DB_FLOOR",
    "NOISY",
    "MetricsReport",
    "SweepResult",
    "to_db",
    "from_db",
    "db_range",
    "compute_metrics",
    "grid_search",
    "PANELS",
    "mse_vs_r_experiment",
    "ConvergenceResult",
    "iterations_to_stability",
    "convergence_trace_experiment",
    "axis_series",
    "gnss_table",
    "wide_table",
    "DEFAULT_Q_DB",
    "DEFAULT_R_DB",
    "DEFAULT_ALPHAS",
]

MSE_DB_FLOOR = -300.0
NOISY = "noisy-passthrough"

DEFAULT_Q_DB = tuple(range(-30, 1, 5))
DEFAULT_R_DB = tuple(range(-10, 31, 2))
DEFAULT_ALPHAS = (0.001, 0.01, 0.05, 0.1, 0.2)


def to_db(x):
    """``10 log10(x)`` floored at ``MSE_DB_FLOOR``; ``inf`` maps to ``inf``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.maximum(10.0 * np.log10(x), MSE_DB_FLOOR)
    return float(out) if out.ndim == 0 else out


def from_db(db):
    db = np.asarray(db, dtype=float)
    out = 10.0 ** (db / 10.0)
    return float(out) if out.ndim == 0 else out


def db_range(start: float, stop: float, step: float) -> list[float]:
    """Inclusive dB range converted to linear variances."""
    count = int(round((stop - start) / step)) + 1
    return [from_db(start + k * step) for k in range(count)]


@dataclass(frozen=True, eq=False)
class MetricsReport:
    rmse_per_dim: np.ndarray
    mse_db_per_dim: np.ndarray
    mean_step_runtime: float
    engine: str
    params: dict = field(default_factory=dict)
    n_steps: int = 0
    eval_dims: tuple[int, ...] = (0,)

    @property
    def mse_per_dim(self) -> np.ndarray:
        return self.rmse_per_dim ** 2

    @property
    def position_mse(self) -> float:
        """Mean MSE over the evaluated dimensions (the grid-search objective)."""
        return float(np.mean(self.mse_per_dim))


def _estimate_array(estimates) -> np.ndarray:
    if isinstance(estimates, FilterResult):
        return estimates.means
    if isinstance(estimates, np.ndarray):
        return estimates.reshape(len(estimates), -1)
    estimates = list(estimates)
    if estimates and isinstance(estimates[0], GaussianBelief):
        return np.array([b.mean for b in estimates], dtype=float)
    return np.asarray(estimates, dtype=float).reshape(len(estimates), -1)


def compute_metrics(
    estimates,
    truth,
    eval_dims: Sequence[int] = (0,),
    timings=None,
    engine: str = "",
    params: dict | None = None,
) -> MetricsReport:
    """Per-dimension RMSE and MSE in dB of ``estimates`` against ``truth``.

    ``estimates`` may be a FilterResult, a sequence of GaussianBelief, or a
    ``(T, m)`` array. A zero error is reported as ``MSE_DB_FLOOR``.
    """
    est = _estimate_array(estimates)
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1:
        truth = truth.reshape(-1, 1)
    if len(est) == 0:
        raise ValueError("cannot compute metrics of an empty estimate sequence")
    if len(est) != len(truth):
        raise ValueError(f"{len(est)} estimates but {len(truth)} truth rows")
    dims = tuple(int(d) for d in eval_dims)
    if not dims:
        raise ValueError("eval_dims must not be empty")

    err = est[:, dims] - truth[:, dims]
    mse = np.mean(err * err, axis=0)
    runtime = math.nan
    if timings is not None and len(timings):
        runtime = float(np.mean(timings))
    return MetricsReport(
        rmse_per_dim=np.sqrt(mse),
        mse_db_per_dim=to_db(mse).reshape(-1),
        mean_step_runtime=runtime,
        engine=str(engine),
        params=dict(params or {}),
        n_steps=len(est),
        eval_dims=dims,
    )


def _failed_report(engine, params, n_steps, dims) -> MetricsReport:
    k = len(dims)
    return MetricsReport(
        rmse_per_dim=np.full(k, np.inf),
        mse_db_per_dim=np.full(k, np.inf),
        mean_step_runtime=math.nan,
        engine=str(engine),
        params=dict(params),
        n_steps=n_steps,
        eval_dims=tuple(dims),
    )


@dataclass(frozen=True, eq=False)
class SweepResult:
    grid: list[tuple]
    reports: list[MetricsReport]
    best: int

    @property
    def best_point(self) -> tuple:
        return self.grid[self.best]

    @property
    def best_report(self) -> MetricsReport:
        return self.reports[self.best]


def grid_search(
    data: ObservationSeries,
    model_builder: Callable[..., SystemModel],
    engine: Engine | str,
    q_grid: Sequence[float],
    r_grid: Sequence[float],
    engine_cfg=None,
    alpha_grid: Sequence[float] | None = None,
    eval_dims: Sequence[int] = (0,),
    initial: GaussianBelief | None = None,
    dt: float | None = None,
) -> SweepResult:
    """Evaluate every ``(q, r[, alpha])`` grid point and pick the lowest position MSE.

    Grid points are visited in ascending ``q``, then ``r``, then ``alpha``
    order, so ties resolve to the smallest values. Points whose filter run
    hits a singular step are reported with infinite MSE.
    """
    engine = Engine(engine)
    if not len(q_grid) or not len(r_grid):
        raise ValueError("q_grid and r_grid must be nonempty")
    if data.truth_states is None:
        raise ValueError("grid search needs ground truth")
    if dt is None:
        dt = data.dt or 1.0

    if engine is Engine.CHI2:
        alphas = sorted(alpha_grid) if alpha_grid else [(engine_cfg or Chi2Config()).alpha]
        grid = [(q, r, a) for q in sorted(q_grid) for r in sorted(r_grid) for a in alphas]
    else:
        grid = [(q, r) for q in sorted(q_grid) for r in sorted(r_grid)]

    def params_of(point):
        keys = ("q_var", "r_var", "alpha")
        return dict(zip(keys, point))

    models = [model_builder(p[0], p[1], dt) for p in grid]
    obs = data.observations
    T = len(obs)

    def run(idx):
        batch_model = stack_models([models[i] for i in idx])
        thresholds = None
        cfg = engine_cfg
        if engine is Engine.CHI2:
            dof = models[0].obs_dim
            thresholds = np.array([chi2_threshold(dof, grid[i][2]) for i in idx])
            cfg = engine_cfg or Chi2Config()
        init = None
        if initial is not None:
            init = GaussianBelief(
                np.broadcast_to(initial.mean, (len(idx), initial.dim)),
                np.broadcast_to(initial.cov, (len(idx), initial.dim, initial.dim)),
            )
        return filter_batch(
            np.broadcast_to(obs, (len(idx),) + obs.shape), batch_model, engine,
            cfg, init, thresholds,
        )

    reports: list[MetricsReport | None] = [None] * len(grid)
    everything = list(range(len(grid)))
    try:
        results = dict(zip(everything, run(everything)))
    except SingularStepError:
        log.info("batched sweep hit a singular step; evaluating grid points one by one")
        results = {}
        for i in everything:
            try:
                results[i] = run([i])[0]
            except SingularStepError as exc:
                log.warning("grid point %s failed: %s", grid[i], exc)

    for i, point in enumerate(grid):
        if i in results:
            res = results[i]
            reports[i] = compute_metrics(res, data.truth_states, eval_dims, res.step_times,
                                         engine.value, params_of(point))
        else:
            reports[i] = _failed_report(engine.value, params_of(point), T, tuple(eval_dims))

    objective = np.array([rep.position_mse for rep in reports])
    best = int(np.argmin(objective))
    return SweepResult(grid=grid, reports=reports, best=best)


# --- synthetic MSE-vs-r experiment -------------------------------------------

PANELS: dict[str, OutlierSpec | None] = {
    "clean": None,
    "low": OutlierSpec(probability=0.2, rayleigh_scale=3.0),
    "high": OutlierSpec(probability=0.2, rayleigh_scale=30.0),
}


def _synthetic_batch(model, x0, T, n_trials, outlier_spec, data_seed, outlier_seed):
    series = []
    for k in range(n_trials):
        s = simulate_trajectory(model, x0, T, seed=data_seed + k)
        if outlier_spec is not None and outlier_spec.probability > 0:
            spec = OutlierSpec(outlier_spec.probability, outlier_spec.rayleigh_scale,
                               outlier_spec.sign_mode, outlier_seed + k)
            s = inject_outliers(s, spec)
        series.append(s)
    return series


def mse_vs_r_experiment(
    r_grid: Sequence[float],
    outlier_spec: OutlierSpec | None,
    engines: Sequence[Engine | str] = (Engine.KF, Engine.OIKF_AM, Engine.OIKF_EM, Engine.CHI2),
    T: int = 2000,
    n_trials: int = 20,
    q_var: float = 0.1,
    dt: float = 1.0,
    x0=(0.0, 0.0),
    data_seed: int = 0,
    outlier_seed: int = 10_000,
    alpha_grid: Sequence[float] = DEFAULT_ALPHAS,
    oikf_cfg: OikfConfig | None = None,
) -> list[dict]:
    """Position MSE (dB) of each engine on WNA data for every ``r^2`` in ``r_grid``.

    Each trial ``k`` uses data seed ``data_seed + k`` and outlier seed
    ``outlier_seed + k``, identical across ``r^2`` values and engines. The
    filters start from the exact initial belief ``N(x0, 0)``. MSE is averaged
    over trials before the dB conversion. CHI2 reports its best ``alpha`` from
    ``alpha_grid`` per ``r^2`` (column ``alpha``).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    engines = [Engine(e) for e in engines]
    x0 = np.asarray(x0, dtype=float)

    obs, truth, models = [], [], []
    for r_var in r_grid:
        model = build_wna_model(q_var, r_var, dt)
        for s in _synthetic_batch(model, x0, T, n_trials, outlier_spec, data_seed, outlier_seed):
            obs.append(s.observations)
            truth.append(s.truth_states)
            models.append(model)
    obs = np.stack(obs)
    truth = np.stack(truth)
    batch_model = stack_models(models)
    B = len(obs)
    initial = GaussianBelief(np.broadcast_to(x0, (B, 2)), np.zeros((B, 2, 2)))

    def trial_mse(results):
        err = np.stack([res.means[:, 0] for res in results]) - truth[:, :, 0]
        return np.mean(err * err, axis=1).reshape(len(r_grid), n_trials).mean(axis=1)

    rows = []
    for engine in engines:
        if engine is Engine.CHI2:
            per_alpha = []
            for alpha in alpha_grid:
                results = filter_batch(obs, batch_model, engine, Chi2Config(alpha), initial)
                per_alpha.append(trial_mse(results))
            per_alpha = np.array(per_alpha)
            best = np.argmin(per_alpha, axis=0)
            mse = per_alpha[best, np.arange(len(r_grid))]
            alphas = [alpha_grid[b] for b in best]
        else:
            results = filter_batch(obs, batch_model, engine, oikf_cfg, initial)
            mse = trial_mse(results)
            alphas = [math.nan] * len(r_grid)
        for r_var, value, alpha in zip(r_grid, mse, alphas):
            rows.append({
                "engine": engine.value,
                "r2": float(r_var),
                "r2_db": round(to_db(r_var), 10),
                "mse_db": to_db(value),
                "alpha": alpha,
            })
    return rows


# --- convergence traces ----------------------------------------------------

def iterations_to_stability(trace: np.ndarray, threshold: float = 0.01) -> int:
    """First iteration (1-based) after which every successive relative change is below ``threshold``.

    Returns ``len(trace)`` when the last recorded change is still above it.
    """
    trace = np.asarray(trace, dtype=float)
    if len(trace) <= 1:
        return len(trace)
    rel = relative_change(trace[1:], trace[:-1])
    above = np.nonzero(rel >= threshold)[0]
    if len(above) == 0:
        return 1
    return min(int(above[-1]) + 2, len(trace))


@dataclass(frozen=True, eq=False)
class ConvergenceResult:
    traces: list[np.ndarray]          # one per detected (step, dim)
    steps: list[tuple[int, int]]
    iterations: np.ndarray

    @property
    def median_iterations(self) -> float:
        return float(np.median(self.iterations)) if len(self.iterations) else math.nan


def convergence_trace_experiment(
    rayleigh_scale: float,
    probability: float = 0.2,
    engine: Engine | str = Engine.OIKF_AM,
    T: int = 1000,
    q_var: float = 0.1,
    r_var: float = 1.0,
    dt: float = 1.0,
    data_seed: int = 0,
    outlier_seed: int = 10_000,
    cfg: OikfConfig | None = None,
    threshold: float = 0.01,
    injected_only: bool = True,
) -> ConvergenceResult:
    """gamma^2 iteration traces at the steps/dimensions where an outlier was detected.

    With ``injected_only`` (default) only detections of injected outliers are
    kept; false alarms on clean entries are dropped.
    """
    engine = Engine(engine)
    if engine not in (Engine.OIKF_AM, Engine.OIKF_EM):
        raise ValueError("convergence traces need an OIKF engine")
    cfg = cfg or OikfConfig()
    cfg = OikfConfig(cfg.variant, cfg.max_iters, cfg.tol, record_trace=True)
    model = build_wna_model(q_var, r_var, dt)
    series = simulate_trajectory(model, np.zeros(2), T, seed=data_seed)
    if probability > 0:
        series = inject_outliers(series, OutlierSpec(probability, rayleigh_scale, seed=outlier_seed))
    initial = GaussianBelief(np.zeros(2), np.zeros((2, 2)))
    res = filter_series(series, model, engine, cfg, initial)

    traces, steps, iters = [], [], []
    hits = res.detected
    if injected_only:
        mask = series.outlier_mask
        hits = hits & (mask if mask is not None else False)
    for t, k in zip(*np.nonzero(hits)):
        trace = res.gamma_trace[t, : res.iters_used[t], k]
        traces.append(trace)
        steps.append((int(t), int(k)))
        iters.append(iterations_to_stability(trace, threshold))
    return ConvergenceResult(traces, steps, np.array(iters, dtype=int))


# --- GNSS-style table ------------------------------------------------------

def axis_series(series: ObservationSeries, axis: int) -> ObservationSeries:
    """Single-axis view of a multi-axis position log.

    Ground truth with ``n`` columns is read as one position per axis; with
    ``2 n`` columns as ``(position, velocity)`` pairs per axis.
    """
    n = series.obs_dim
    truth = series.truth_states
    if truth is not None:
        if truth.shape[1] == n:
            truth = truth[:, axis: axis + 1]
        elif truth.shape[1] == 2 * n:
            truth = truth[:, 2 * axis: 2 * axis + 2]
        else:
            raise ValueError(f"cannot map {truth.shape[1]} truth columns onto {n} axes")
    mask = None if series.outlier_mask is None else series.outlier_mask[:, axis: axis + 1]
    return ObservationSeries(series.times, series.observations[:, axis: axis + 1], truth, mask)


def _timed_run(series, model, engine, cfg, repeats=1):
    best = None
    for _ in range(repeats):
        res = filter_series(series, model, engine, cfg)
        if best is None or np.mean(res.step_times) < np.mean(best.step_times):
            best = res
    return best


def gnss_table(
    series: ObservationSeries,
    engines: Sequence[str] = (NOISY, "KF", "CHI2", "OIKF-AM", "OIKF-EM"),
    q_grid: Sequence[float] | None = None,
    r_grid: Sequence[float] | None = None,
    alpha_grid: Sequence[float] = DEFAULT_ALPHAS,
    axis_names: Sequence[str] | None = None,
    dt: float | None = None,
    oikf_cfg: OikfConfig | None = None,
    timing: bool = True,
) -> tuple[list[dict], dict]:
    """Tuned position errors per axis for every engine on a position-only log.

    Each axis is filtered independently with the position-only model and each
    engine's ``(q, r[, alpha])`` is tuned by grid search per axis. The runtime
    is measured on a single-series rerun at the tuned parameters.

    Returns
    -------
    rows : list of dict
        Tidy rows ``engine, q_var, r_var, alpha, dim, rmse, mse_db, runtime_ms``.
    sweeps : dict
        ``(engine, axis_name) -> SweepResult``.
    """
    if series.truth_states is None:
        raise ValueError("the table needs ground truth")
    q_grid = q_grid or [from_db(v) for v in DEFAULT_Q_DB]
    r_grid = r_grid or [from_db(v) for v in DEFAULT_R_DB]
    n = series.obs_dim
    axis_names = list(axis_names or [f"axis{k + 1}" for k in range(n)])
    dt = dt or series.dt or 1.0

    rows, sweeps = [], {}
    for name in engines:
        for k, axis in enumerate(axis_names):
            one = axis_series(series, k)
            if name == NOISY:
                rep = compute_metrics(one.observations, one.truth_states[:, :1], (0,))
                rows.append(_table_row(NOISY, math.nan, math.nan, math.nan, axis, rep, math.nan))
                continue
            engine = Engine(name)
            cfg = oikf_cfg if engine in (Engine.OIKF_AM, Engine.OIKF_EM) else None
            sweep = grid_search(one, build_position_only_model, engine, q_grid, r_grid,
                                engine_cfg=cfg,
                                alpha_grid=alpha_grid if engine is Engine.CHI2 else None,
                                dt=dt)
            sweeps[(engine.value, axis)] = sweep
            point = sweep.best_point
            rep = sweep.best_report
            runtime_ms = math.nan
            if timing and math.isfinite(rep.position_mse):
                model = build_position_only_model(point[0], point[1], dt)
                run_cfg = Chi2Config(point[2]) if engine is Engine.CHI2 else cfg
                res = _timed_run(one, model, engine, run_cfg)
                runtime_ms = 1e3 * float(np.mean(res.step_times))
            alpha = point[2] if len(point) > 2 else math.nan
            rows.append(_table_row(engine.value, point[0], point[1], alpha, axis, rep, runtime_ms))
    return rows, sweeps


def _table_row(engine, q_var, r_var, alpha, axis, rep: MetricsReport, runtime_ms) -> dict:
    return {
        "engine": engine,
        "q_var": q_var,
        "r_var": r_var,
        "alpha": alpha,
        "dim": axis,
        "rmse": float(rep.rmse_per_dim[0]),
        "mse_db": float(rep.mse_db_per_dim[0]),
        "runtime_ms": runtime_ms,
    }


def wide_table(rows: list[dict], axis_names: Sequence[str]) -> tuple[list[str], list[list]]:
    """Pivot tidy table rows into one line per engine: RMSE and MSE per axis, then runtime."""
    header = ["engine"]
    for axis in axis_names:
        header += [f"{axis} RMSE[m]", f"{axis} MSE[dB]"]
    header.append("runtime[ms]")
    by_engine: dict[str, dict] = {}
    for row in rows:
        by_engine.setdefault(row["engine"], {})[row["dim"]] = row
    lines = []
    for engine, cells in by_engine.items():
        line = [engine]
        runtimes = []
        for axis in axis_names:
            cell = cells[axis]
            line += [cell["rmse"], cell["mse_db"]]
            runtimes.append(cell["runtime_ms"])
        finite = [v for v in runtimes if not math.isnan(v)]
        line.append(float(np.mean(finite)) if finite else math.nan)
        lines.append(line)
    return header, lines
