"""Outlier-insensitive Kalman update with a normal-unknown-variance (NUV) prior.

Each observation dimension ``k`` gets an outlier term ``u_k ~ N(0, gamma_k^2)``
whose variance is estimated inside the update step. The effective observation
covariance becomes ``Gamma = diag(r^2 + gamma^2)`` and the update is repeated
with the refined ``Gamma`` against a fixed prior. With a flat prior on
``gamma^2`` the estimate is ``max(stat - r^2, 0)``, where ``stat`` is

* AM: the squared residual ``(y - H x_hat)^2`` of the current posterior mean;
* EM: the posterior expectation ``E[(y - H x)^2]``, i.e. squared residual plus
  ``(H Sigma H^T)_kk``.

A zero estimate leaves ``Gamma = R`` and the step is the plain Kalman update.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .kalman import GaussianBelief, update
from .ssmodel import SystemModel

__all__ = [
    "Variant",
    "OikfConfig",
    "StepDiagnostics",
    "nuv_gamma_mle",
    "nuv_u_map",
    "nuv_loss",
    "em_second_moment",
    "em_nu_sq",
    "am_residual_sq",
    "relative_change",
    "oikf_step",
    "GAMMA_CEILING",
]

# Gamma is capped at GAMMA_CEILING * max(r^2).
GAMMA_CEILING = 1e12


class Variant(str, enum.Enum):
    AM = "AM"
    EM = "EM"


@dataclass(frozen=True)
class OikfConfig:
    variant: Variant = Variant.AM
    max_iters: int = 10
    tol: float = 1e-6
    record_trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters!r}")
        if not self.tol >= 0:
            raise ValueError(f"tol must be nonnegative, got {self.tol!r}")


@dataclass(frozen=True, eq=False)
class StepDiagnostics:
    """Per-step output of the outlier-insensitive update.

    Attributes
    ----------
    gamma_sq : (..., n) array
        Final outlier-variance estimates.
    nu_sq : (..., n) array
        The statistic the final estimate was computed from (squared residual
        for AM, posterior expected squared residual for EM).
    iters_used : (...) int array
        Number of inner updates performed.
    detected : (..., n) bool array
        ``gamma_sq > 0``.
    gamma_trace : (..., max_iters, n) array or None
        Per-iteration estimates, NaN-padded past ``iters_used``.
    """

    gamma_sq: np.ndarray
    nu_sq: np.ndarray
    iters_used: np.ndarray
    detected: np.ndarray
    gamma_trace: np.ndarray | None = None


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def nuv_gamma_mle(y, r_sq):
    """Maximum-likelihood outlier variance from one sample: ``max(y^2 - r^2, 0)``."""
    y = np.asarray(y, dtype=float)
    return _scalar_or_array(np.maximum(y * y - r_sq, 0.0))


def nuv_u_map(y, r_sq):
    """MAP outlier value given the ML variance: ``y * g / (g + r^2)``."""
    y = np.asarray(y, dtype=float)
    g = np.maximum(y * y - r_sq, 0.0)
    return _scalar_or_array(y * g / (g + r_sq))


def nuv_loss(y, r_sq):
    """Negative log evidence with the variance profiled out.

    Quadratic inside ``|y| < r``, logarithmic outside; its derivative decays
    like ``1/y`` for large residuals.
    """
    y = np.asarray(y, dtype=float)
    r = np.sqrt(r_sq)
    inside = y * y < r_sq
    with np.errstate(divide="ignore"):
        outer = np.log(np.abs(y)) + 0.5
    return _scalar_or_array(np.where(inside, y * y / (2.0 * r_sq) + np.log(r), outer))


def em_second_moment(posterior: GaussianBelief) -> np.ndarray:
    """Posterior second moment ``E[x x^T] = Sigma + x_hat x_hat^T``."""
    mean = posterior.mean
    return posterior.cov + mean[..., :, None] * mean[..., None, :]


def em_nu_sq(y, posterior: GaussianBelief, model: SystemModel) -> np.ndarray:
    """Posterior expected squared residual per observation dimension.

    Equal to ``y_k^2 - 2 y_k (H x_hat)_k + (H E[x x^T] H^T)_kk``; evaluated as
    ``(y_k - (H x_hat)_k)^2 + (H Sigma H^T)_kk`` which avoids cancellation when
    the observations are large (e.g. absolute positions).
    """
    y = np.asarray(y, dtype=float)
    H = model.h_mat
    resid = y - (H @ posterior.mean[..., None])[..., 0]
    spread = np.einsum("...ki,...ij,...kj->...k", H, posterior.cov, H)
    return resid * resid + spread


def am_residual_sq(y, belief: GaussianBelief, model: SystemModel) -> np.ndarray:
    resid = np.asarray(y, dtype=float) - (model.h_mat @ belief.mean[..., None])[..., 0]
    return resid * resid


def relative_change(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    """``|new - old| / max(|new|, |old|)``, zero where both are zero."""
    denom = np.maximum(np.abs(new), np.abs(old))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(new - old) / denom
    return np.where(denom > 0, rel, 0.0)


def _diag_cov(variances: np.ndarray) -> np.ndarray:
    n = variances.shape[-1]
    return variances[..., None, :] * np.eye(n)


def _select(mask: np.ndarray, a: GaussianBelief, b: GaussianBelief) -> GaussianBelief:
    return GaussianBelief(
        np.where(mask[..., None], a.mean, b.mean),
        np.where(mask[..., None, None], a.cov, b.cov),
    )


def oikf_step(
    prior: GaussianBelief,
    y,
    model: SystemModel,
    cfg: OikfConfig = OikfConfig(),
) -> tuple[GaussianBelief, StepDiagnostics]:
    """Outlier-insensitive update of a predicted belief with observation ``y``.

    The prior is fixed for the whole inner loop; every iteration re-estimates
    ``gamma^2`` and recomputes the posterior from the prior with
    ``Gamma = diag(r^2 + gamma^2)``. AM's first estimate uses the innovation
    (residual against the prior mean); EM's first E-step uses the plain
    Kalman posterior (``gamma^2 = 0``). The loop stops once the largest
    relative change of ``gamma^2`` between consecutive estimates is below
    ``cfg.tol``, or after ``cfg.max_iters`` iterations. Batched inputs stop
    per element.
    """
    y = np.asarray(y, dtype=float)
    r_sq = model.r_diag
    if np.any(r_sq <= 0):
        raise ValueError("outlier-insensitive update needs strictly positive R diagonal")
    ceiling = GAMMA_CEILING * np.max(r_sq, axis=-1, keepdims=True) - r_sq

    batch = np.broadcast_shapes(prior.mean.shape[:-1], y.shape[:-1], model.batch_shape)
    n = model.obs_dim
    em = cfg.variant is Variant.EM

    if em:
        current, _ = update(prior, y, model, model.r_cov)
        gamma_prev = np.zeros(batch + (n,))
    else:
        current = prior
        gamma_prev = None
    active = np.ones(batch, dtype=bool)
    iters = np.zeros(batch, dtype=int)
    nu_sq = np.zeros(batch + (n,))
    trace = np.full(batch + (cfg.max_iters, n), np.nan) if cfg.record_trace else None
    posterior = None

    for i in range(cfg.max_iters):
        stat = em_nu_sq(y, current, model) if em else am_residual_sq(y, current, model)
        stat = np.broadcast_to(stat, batch + (n,))
        gamma = np.clip(stat - r_sq, 0.0, ceiling)
        if gamma_prev is not None:
            gamma = np.where(active[..., None], gamma, gamma_prev)
            nu_sq = np.where(active[..., None], stat, nu_sq)
        else:
            nu_sq = stat

        candidate, _ = update(prior, y, model, _diag_cov(r_sq + gamma))
        posterior = candidate if posterior is None else _select(active, candidate, posterior)
        iters = iters + active
        if trace is not None:
            trace[..., i, :] = np.where(active[..., None], gamma, np.nan)

        if gamma_prev is not None:
            converged = np.max(relative_change(gamma, gamma_prev), axis=-1) < cfg.tol
            active = active & ~converged
        gamma_prev = gamma
        current = posterior
        if not active.any():
            break

    diagnostics = StepDiagnostics(
        gamma_sq=gamma_prev,
        nu_sq=nu_sq,
        iters_used=iters,
        detected=gamma_prev > 0,
        gamma_trace=trace,
    )
    return posterior, diagnostics
