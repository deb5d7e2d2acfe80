"""Causal filtering over whole observation series with a selectable update engine."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, replace

import numpy as np

from .baselines import Chi2Config, chi2_gated_update, chi2_threshold
from .kalman import GaussianBelief, SingularInnovationError, initial_belief, predict, update
from .nuv import OikfConfig, StepDiagnostics, Variant, oikf_step
from .ssmodel import ObservationSeries, SystemModel

__all__ = [
    "Engine",
    "FilterResult",
    "SingularStepError",
    "filter_series",
    "filter_batch",
]


class Engine(str, enum.Enum):
    KF = "KF"
    OIKF_AM = "OIKF-AM"
    OIKF_EM = "OIKF-EM"
    CHI2 = "CHI2"


class SingularStepError(SingularInnovationError):
    def __init__(self, time_index: int, message: str):
        super().__init__(f"step {time_index}: {message}")
        self.time_index = time_index


@dataclass(frozen=True, eq=False)
class FilterResult:
    """Posterior moments and diagnostics for every step of one series."""

    engine: Engine
    means: np.ndarray        # (T, m)
    covs: np.ndarray         # (T, m, m)
    gamma_sq: np.ndarray     # (T, n)
    nu_sq: np.ndarray        # (T, n)
    iters_used: np.ndarray   # (T,)
    detected: np.ndarray     # (T, n)
    step_times: np.ndarray   # (T,) seconds
    gamma_trace: np.ndarray | None = None  # (T, max_iters, n)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def beliefs(self) -> list[GaussianBelief]:
        return [GaussianBelief(m, c) for m, c in zip(self.means, self.covs)]

    @property
    def diagnostics(self) -> list[StepDiagnostics]:
        out = []
        for t in range(len(self)):
            trace = None
            if self.gamma_trace is not None:
                trace = self.gamma_trace[t, : self.iters_used[t]]
            out.append(StepDiagnostics(
                gamma_sq=self.gamma_sq[t],
                nu_sq=self.nu_sq[t],
                iters_used=self.iters_used[t],
                detected=self.detected[t],
                gamma_trace=trace,
            ))
        return out


def _engine_step(engine: Engine, model: SystemModel, cfg, thresholds):
    if engine is Engine.KF:
        def step(prior, y):
            post, _ = update(prior, y, model)
            shape = post.mean.shape[:-1] + (model.obs_dim,)
            zeros = np.zeros(shape)
            return post, StepDiagnostics(zeros, zeros, np.ones(shape[:-1], dtype=int), zeros > 0)
        return step

    if engine is Engine.CHI2:
        cfg = cfg if cfg is not None else Chi2Config()
        if not isinstance(cfg, Chi2Config):
            raise TypeError(f"CHI2 engine needs a Chi2Config, got {type(cfg).__name__}")
        if thresholds is None:
            thresholds = chi2_threshold(cfg.dof or model.obs_dim, cfg.alpha)
        thresholds = np.asarray(thresholds, dtype=float)
        return lambda prior, y: chi2_gated_update(prior, y, model, cfg, threshold=thresholds)

    cfg = cfg if cfg is not None else OikfConfig()
    if not isinstance(cfg, OikfConfig):
        raise TypeError(f"{engine.value} engine needs an OikfConfig, got {type(cfg).__name__}")
    cfg = replace(cfg, variant=Variant.AM if engine is Engine.OIKF_AM else Variant.EM)
    return lambda prior, y: oikf_step(prior, y, model, cfg)


def filter_batch(
    observations,
    model: SystemModel,
    engine: Engine | str,
    cfg=None,
    initial: GaussianBelief | None = None,
    thresholds=None,
) -> list[FilterResult]:
    """Filter ``B`` equal-length series in one vectorized pass.

    Parameters
    ----------
    observations : (B, T, n) array
    model : SystemModel
        Either unbatched or with batch shape ``(B,)`` (one model per series).
    engine : Engine
    cfg : OikfConfig or Chi2Config, optional
    initial : GaussianBelief, optional
        Belief before the first prediction; defaults to a diffuse belief
        centred on the back-projected first observation.
    thresholds : array, optional
        Per-series gate thresholds for the CHI2 engine.

    Returns
    -------
    list of FilterResult
        One per series. ``step_times`` is the batch wall time divided by ``B``.

    Raises
    ------
    SingularStepError
        With the index of the first step whose innovation covariance is singular.
    """
    engine = Engine(engine)
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 3:
        raise ValueError(f"observations must be (B, T, n), got shape {obs.shape}")
    B, T, n = obs.shape
    if n != model.obs_dim:
        raise ValueError(f"observations have {n} columns, model obs_dim is {model.obs_dim}")
    if model.batch_shape not in ((), (B,)):
        raise ValueError(f"model batch shape {model.batch_shape} does not match {B} series")
    m = model.state_dim

    record = isinstance(cfg, OikfConfig) and cfg.record_trace and engine in (Engine.OIKF_AM, Engine.OIKF_EM)
    means = np.empty((B, T, m))
    covs = np.empty((B, T, m, m))
    gamma = np.empty((B, T, n))
    nu = np.empty((B, T, n))
    iters = np.empty((B, T), dtype=int)
    detected = np.empty((B, T, n), dtype=bool)
    trace = np.empty((B, T, cfg.max_iters, n)) if record else None
    step_times = np.empty(T)

    if T > 0:
        step = _engine_step(engine, model, cfg, thresholds)
        belief = initial if initial is not None else initial_belief(model, obs[:, 0])
        if belief.mean.shape[:-1] != (B,):
            belief = GaussianBelief(
                np.broadcast_to(belief.mean, (B, m)), np.broadcast_to(belief.cov, (B, m, m))
            )
        for t in range(T):
            start = time.perf_counter()
            prior = predict(belief, model)
            try:
                belief, diag = step(prior, obs[:, t])
            except SingularInnovationError as exc:
                raise SingularStepError(t, str(exc)) from exc
            step_times[t] = time.perf_counter() - start

            means[:, t] = belief.mean
            covs[:, t] = belief.cov
            gamma[:, t] = diag.gamma_sq
            nu[:, t] = diag.nu_sq
            iters[:, t] = diag.iters_used
            detected[:, t] = diag.detected
            if record:
                trace[:, t] = diag.gamma_trace

    step_times = step_times / max(B, 1)
    return [
        FilterResult(
            engine=engine,
            means=means[b],
            covs=covs[b],
            gamma_sq=gamma[b],
            nu_sq=nu[b],
            iters_used=iters[b],
            detected=detected[b],
            step_times=step_times.copy(),
            gamma_trace=None if trace is None else trace[b],
        )
        for b in range(B)
    ]


def filter_series(
    series: ObservationSeries,
    model: SystemModel,
    engine: Engine | str,
    cfg=None,
    initial: GaussianBelief | None = None,
) -> FilterResult:
    """Run predict + engine update over ``series`` in time order.

    The estimate at step ``t`` depends on ``y_1..y_t`` only. An empty series
    gives empty outputs.
    """
    if model.batch_shape:
        raise ValueError("filter_series needs an unbatched model; use filter_batch")
    obs = series.observations
    if len(series) == 0:
        obs = np.empty((0, model.obs_dim))
    if initial is not None:
        initial = GaussianBelief(initial.mean[None], initial.cov[None])
    return filter_batch(obs[None], model, engine, cfg, initial)[0]
