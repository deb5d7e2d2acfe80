"""Linear-Gaussian state-space models with additive observation outliers.

The generative model is

    x_t = F x_{t-1} + e_t,        e_t ~ N(0, Q)
    y_t = H x_t + z_t + u_t,      z_t ~ N(0, R)

where ``u_t`` is a sparse outlier term. ``simulate_trajectory`` draws the
outlier-free part, ``inject_outliers`` adds Bernoulli-gated Rayleigh
outliers on top.

Model matrices may carry leading batch dimensions (``(..., m, m)`` etc.) so
that a whole parameter grid can be filtered in one vectorized pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "SystemModel",
    "SignMode",
    "OutlierSpec",
    "ObservationSeries",
    "build_wna_model",
    "build_position_only_model",
    "stack_models",
    "simulate_trajectory",
    "inject_outliers",
]

_SYM_TOL = 1e-10


def _is_symmetric(a: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    return bool(np.all(np.abs(a - np.swapaxes(a, -1, -2)) <= _SYM_TOL * scale))


def _is_psd(a: np.ndarray) -> bool:
    if a.size == 0:
        return True
    eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))
    trace = np.abs(np.trace(a, axis1=-2, axis2=-1))
    return bool(np.all(eig >= -1e-9 * np.maximum(trace, 1.0)[..., None]))


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Matrices ``F, H, Q, R`` of a linear-Gaussian state-space model.

    ``r_cov`` must be diagonal: the outlier-variance estimators work one
    observation dimension at a time. Zero diagonal entries are accepted here
    (noise-free simulation); the filters require them to be positive.
    """

    f_mat: np.ndarray
    h_mat: np.ndarray
    q_cov: np.ndarray
    r_cov: np.ndarray

    def __post_init__(self):
        for name in ("f_mat", "h_mat", "q_cov", "r_cov"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim < 2:
                raise ValueError(f"{name} must be at least 2-D, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

        m, n = self.state_dim, self.obs_dim
        if self.f_mat.shape[-2:] != (m, m):
            raise ValueError(f"f_mat must be {m}x{m}, got {self.f_mat.shape[-2:]}")
        if self.h_mat.shape[-1] != m:
            raise ValueError(f"h_mat must have {m} columns, got {self.h_mat.shape[-1]}")
        if self.q_cov.shape[-2:] != (m, m):
            raise ValueError(f"q_cov must be {m}x{m}, got {self.q_cov.shape[-2:]}")
        if self.r_cov.shape[-2:] != (n, n):
            raise ValueError(f"r_cov must be {n}x{n}, got {self.r_cov.shape[-2:]}")
        try:
            np.broadcast_shapes(
                self.f_mat.shape[:-2], self.h_mat.shape[:-2],
                self.q_cov.shape[:-2], self.r_cov.shape[:-2],
            )
        except ValueError as exc:
            raise ValueError("model batch shapes do not broadcast") from exc

        if not (_is_symmetric(self.q_cov) and _is_psd(self.q_cov)):
            raise ValueError("q_cov must be symmetric positive semidefinite")
        off_diag = self.r_cov * (1.0 - np.eye(n))
        if np.any(off_diag != 0.0):
            raise ValueError("r_cov must be diagonal")
        if np.any(self.r_diag < 0.0) or not np.all(np.isfinite(self.r_diag)):
            raise ValueError("r_cov diagonal entries must be finite and nonnegative")

    @property
    def state_dim(self) -> int:
        return self.f_mat.shape[-1]

    @property
    def obs_dim(self) -> int:
        return self.h_mat.shape[-2]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(
            self.f_mat.shape[:-2], self.h_mat.shape[:-2],
            self.q_cov.shape[:-2], self.r_cov.shape[:-2],
        )

    @property
    def r_diag(self) -> np.ndarray:
        """Per-dimension observation noise variances, shape ``(..., n)``."""
        return np.diagonal(self.r_cov, axis1=-2, axis2=-1)


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if not np.isfinite(value) or value <= 0:
            raise ValueError(f"{name} must be a positive finite number, got {value!r}")


def _cv_transition(dt: float) -> np.ndarray:
    return np.array([[1.0, dt], [0.0, 1.0]])


def build_wna_model(q_var: float, r_var: float, dt: float = 1.0) -> SystemModel:
    """Position/velocity model with both components observed.

    ``Q = q_var * I`` and ``R = r_var * I`` (diagonal process noise rather than
    the textbook discretized-acceleration form).
    """
    _check_positive(q_var=q_var, r_var=r_var, dt=dt)
    return SystemModel(
        f_mat=_cv_transition(dt),
        h_mat=np.eye(2),
        q_cov=q_var * np.eye(2),
        r_cov=r_var * np.eye(2),
    )


def build_position_only_model(q_var: float, r_var: float, dt: float = 1.0) -> SystemModel:
    """Position/velocity model observing position only (``H = [1, 0]``)."""
    _check_positive(q_var=q_var, r_var=r_var, dt=dt)
    return SystemModel(
        f_mat=_cv_transition(dt),
        h_mat=np.array([[1.0, 0.0]]),
        q_cov=q_var * np.eye(2),
        r_cov=np.array([[r_var]]),
    )


def stack_models(models) -> SystemModel:
    """Stack same-shaped models along a new leading batch axis."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model to stack")
    return SystemModel(
        f_mat=np.stack([np.broadcast_to(md.f_mat, models[0].f_mat.shape) for md in models]),
        h_mat=np.stack([md.h_mat for md in models]),
        q_cov=np.stack([md.q_cov for md in models]),
        r_cov=np.stack([md.r_cov for md in models]),
    )


class SignMode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    POSITIVE = "positive"


@dataclass(frozen=True)
class OutlierSpec:
    """Bernoulli(p) occurrence, Rayleigh(scale) magnitude, random or positive sign.

    ``rayleigh_scale`` is the sigma of the Rayleigh pdf
    ``(x / sigma^2) exp(-x^2 / (2 sigma^2))``; the mean magnitude is
    ``sigma * sqrt(pi / 2)``.
    """

    probability: float
    rayleigh_scale: float
    sign_mode: SignMode = SignMode.SYMMETRIC
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability!r}")
        if not np.isfinite(self.rayleigh_scale) or self.rayleigh_scale <= 0:
            raise ValueError(f"rayleigh_scale must be positive, got {self.rayleigh_scale!r}")
        object.__setattr__(self, "sign_mode", SignMode(self.sign_mode))


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    """Observations ``y_1..y_T`` with optional ground truth and outlier mask."""

    times: np.ndarray
    observations: np.ndarray
    truth_states: np.ndarray | None = None
    outlier_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        obs = np.array(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1) if obs.size else obs.reshape(0, 0)
        if obs.ndim != 2:
            raise ValueError(f"observations must be T x n, got shape {obs.shape}")
        T = len(times)
        if obs.shape[0] != T:
            raise ValueError(f"observations have {obs.shape[0]} rows, times have {T}")
        truth = None
        if self.truth_states is not None:
            truth = np.array(self.truth_states, dtype=float)
            if truth.ndim == 1:
                truth = truth.reshape(-1, 1)
            if truth.shape[0] != T:
                raise ValueError(f"truth_states have {truth.shape[0]} rows, expected {T}")
        mask = None
        if self.outlier_mask is not None:
            mask = np.array(self.outlier_mask, dtype=bool)
            if mask.ndim == 1:
                mask = mask.reshape(-1, 1)
            if mask.shape != obs.shape:
                raise ValueError(f"outlier_mask shape {mask.shape} != observations {obs.shape}")
        for arr in (times, obs, truth, mask):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "truth_states", truth)
        object.__setattr__(self, "outlier_mask", mask)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def dt(self) -> float | None:
        """Median spacing of the timestamps (None for fewer than two samples)."""
        if len(self.times) < 2:
            return None
        return float(np.median(np.diff(self.times)))

    def __eq__(self, other):
        if not isinstance(other, ObservationSeries):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            same(self.times, other.times)
            and same(self.observations, other.observations)
            and same(self.truth_states, other.truth_states)
            and same(self.outlier_mask, other.outlier_mask)
        )


def simulate_trajectory(
    model: SystemModel,
    x0,
    horizon: int,
    seed: int,
    dt: float = 1.0,
) -> ObservationSeries:
    """Draw ``horizon`` outlier-free steps starting one transition after ``x0``.

    Timestamps are ``dt, 2 dt, ..., horizon * dt``. The output is a pure
    function of the arguments.
    """
    if model.batch_shape:
        raise ValueError("simulate_trajectory needs an unbatched model")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    m, n = model.state_dim, model.obs_dim
    if x0.shape != (m,):
        raise ValueError(f"x0 has length {x0.size}, model state_dim is {m}")

    rng = np.random.default_rng(seed)
    proc = rng.multivariate_normal(np.zeros(m), model.q_cov, size=horizon, method="eigh")
    meas = rng.multivariate_normal(np.zeros(n), model.r_cov, size=horizon, method="eigh")

    states = np.empty((horizon, m))
    x = x0
    for t in range(horizon):
        x = model.f_mat @ x + proc[t]
        states[t] = x
    obs = states @ model.h_mat.T + meas
    return ObservationSeries(
        times=dt * np.arange(1, horizon + 1),
        observations=obs,
        truth_states=states,
    )


def inject_outliers(series: ObservationSeries, spec: OutlierSpec) -> ObservationSeries:
    """Add sparse outliers independently per time step and observation dimension.

    Each entry is hit with probability ``spec.probability``; the outlier
    magnitude is a Rayleigh draw and its sign is random (symmetric mode) or
    positive. An existing mask is OR-ed with the new one.
    """
    obs = series.observations
    rng = np.random.default_rng(spec.seed)
    hit = rng.random(obs.shape) < spec.probability
    magnitude = rng.rayleigh(spec.rayleigh_scale, size=obs.shape)
    if spec.sign_mode is SignMode.SYMMETRIC:
        sign = np.where(rng.random(obs.shape) < 0.5, -1.0, 1.0)
    else:
        sign = np.ones(obs.shape)
    outliers = np.where(hit, sign * magnitude, 0.0)

    mask = hit if series.outlier_mask is None else (hit | series.outlier_mask)
    return replace(series, observations=obs + outliers, outlier_mask=mask)
