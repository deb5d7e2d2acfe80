"""Chi-squared innovation gating: reject the whole observation or keep it."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .kalman import GaussianBelief, update
from .nuv import StepDiagnostics
from .ssmodel import SystemModel

__all__ = [
    "Chi2Config",
    "chi2_threshold",
    "chi2_sf",
    "normalized_innovation_sq",
    "chi2_gated_update",
]


@dataclass(frozen=True)
class Chi2Config:
    alpha: float = 0.05
    dof: int | None = None  # defaults to the observation dimension

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.dof is not None and (int(self.dof) != self.dof or self.dof < 1):
            raise ValueError(f"dof must be a positive integer, got {self.dof!r}")


def chi2_sf(x: float, dof: int) -> float:
    """Upper-tail probability of the chi-squared distribution (integer dof)."""
    if x <= 0:
        return 1.0
    half = 0.5 * x
    if dof % 2 == 0:
        term, total = 1.0, 1.0
        for j in range(1, dof // 2):
            term *= half / j
            total += term
        return math.exp(-half) * total
    root = math.sqrt(x)
    total = math.erfc(root / math.sqrt(2.0))
    if dof > 1:
        term = 2.0 * math.exp(-half) / math.sqrt(2.0 * math.pi) * root
        acc = term
        for j in range(2, (dof + 1) // 2):
            term *= x / (2 * j - 1)
            acc += term
        total += acc
    return total


def _chi2_pdf(x: float, dof: int) -> float:
    k = 0.5 * dof
    return math.exp((k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k))


def chi2_threshold(dof: int, alpha: float) -> float:
    """Upper ``alpha`` quantile of chi-squared with ``dof`` degrees of freedom.

    Wilson-Hilferty cube-root approximation as the starting point, polished
    with Newton steps on the exact survival function.
    """
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    dof = int(dof)
    z = NormalDist().inv_cdf(1.0 - alpha)
    c = 2.0 / (9.0 * dof)
    x = dof * max(1.0 - c + z * math.sqrt(c), 1e-3) ** 3

    for _ in range(50):
        step = (chi2_sf(x, dof) - alpha) / _chi2_pdf(x, dof)
        new = x + step
        if new <= 0:
            new = 0.5 * x
        if abs(new - x) <= 1e-14 * x:
            x = new
            break
        x = new
    return x


def normalized_innovation_sq(innovation: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``dy^T S^-1 dy`` over the trailing dimension."""
    if S.shape[-1] == 1:
        return innovation[..., 0] ** 2 / S[..., 0, 0]
    return np.einsum("...i,...i->...", innovation, np.linalg.solve(S, innovation[..., None])[..., 0])


def chi2_gated_update(
    prior: GaussianBelief,
    y,
    model: SystemModel,
    cfg: Chi2Config = Chi2Config(),
    threshold=None,
) -> tuple[GaussianBelief, StepDiagnostics]:
    """Kalman update that falls back to the prior when the innovation fails the test.

    A rejected step is reported as an infinite outlier variance in every
    observation dimension. ``threshold`` overrides the quantile derived from
    ``cfg`` and may be an array matching the batch shape.
    """
    if threshold is None:
        threshold = chi2_threshold(cfg.dof or model.obs_dim, cfg.alpha)
    y = np.asarray(y, dtype=float)
    posterior, art = update(prior, y, model)
    d = normalized_innovation_sq(art.innovation, art.innovation_cov)
    reject = d > threshold

    mean = np.where(reject[..., None], np.broadcast_to(prior.mean, posterior.mean.shape), posterior.mean)
    cov = np.where(reject[..., None, None], np.broadcast_to(prior.cov, posterior.cov.shape), posterior.cov)
    n = model.obs_dim
    gamma = np.where(reject[..., None], np.inf, np.zeros(reject.shape + (n,)))
    diag = StepDiagnostics(
        gamma_sq=gamma,
        nu_sq=np.broadcast_to(art.innovation ** 2, gamma.shape).copy(),
        iters_used=np.ones(reject.shape, dtype=int),
        detected=np.broadcast_to(reject[..., None], gamma.shape).copy(),
    )
    return GaussianBelief(mean, cov), diag
