"""Linear Kalman filter predict/update.

All functions accept leading batch dimensions on beliefs, observations and
model matrices (``mean`` is ``(..., m)``, ``cov`` is ``(..., m, m)``) and
broadcast them with numpy's matmul rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssmodel import SystemModel

__all__ = [
    "GaussianBelief",
    "UpdateArtifacts",
    "SingularInnovationError",
    "symmetrize",
    "predict",
    "project_to_obs",
    "update",
    "initial_belief",
    "DIFFUSE_VARIANCE",
    "COND_LIMIT",
]

DIFFUSE_VARIANCE = 1e3
COND_LIMIT = 1e12


class SingularInnovationError(np.linalg.LinAlgError):
    """The innovation covariance cannot be inverted reliably."""


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Mean and covariance of a Gaussian state belief."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim < 1:
            mean = mean.reshape(1)
        if cov.ndim < 2:
            cov = cov.reshape(mean.shape + mean.shape[-1:])
        m = mean.shape[-1]
        if cov.shape[-2:] != (m, m):
            raise ValueError(f"cov shape {cov.shape} does not match mean dimension {m}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def is_valid(self, rel_eps: float = 1e-9) -> bool:
        """Symmetric and positive semidefinite up to ``rel_eps * trace``."""
        cov = self.cov
        scale = np.maximum(np.abs(np.trace(cov, axis1=-2, axis2=-1)), 1.0)
        if np.any(np.abs(cov - np.swapaxes(cov, -1, -2)) > rel_eps * scale[..., None, None]):
            return False
        eig = np.linalg.eigvalsh(cov)
        return bool(np.all(eig >= -rel_eps * scale[..., None]))


@dataclass(frozen=True, eq=False)
class UpdateArtifacts:
    predicted_obs: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _mv(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product."""
    return (mat @ vec[..., None])[..., 0]


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def predict(belief: GaussianBelief, model: SystemModel) -> GaussianBelief:
    """Time update: ``mean' = F mean``, ``cov' = F cov F^T + Q``."""
    if belief.dim != model.state_dim:
        raise ValueError(f"belief has dimension {belief.dim}, model state_dim is {model.state_dim}")
    F = model.f_mat
    return GaussianBelief(
        mean=_mv(F, belief.mean),
        cov=symmetrize(F @ belief.cov @ _t(F) + model.q_cov),
    )


def _check_innovation_cov(S: np.ndarray) -> None:
    diag = np.diagonal(S, axis1=-2, axis2=-1)
    if not np.all(np.isfinite(S)):
        raise SingularInnovationError("innovation covariance has non-finite entries")
    if np.any(diag <= 0.0):
        raise SingularInnovationError("innovation covariance has a non-positive diagonal entry")
    n = S.shape[-1]
    if n == 1:
        return
    # Condition number of the diagonally scaled matrix; plain cond(S) would
    # flag a legitimately huge outlier variance on one axis as singular.
    d = 1.0 / np.sqrt(diag)
    corr = S * d[..., :, None] * d[..., None, :]
    if n == 2:
        rho = np.abs(corr[..., 0, 1])
        with np.errstate(divide="ignore"):
            cond = (1.0 + rho) / (1.0 - rho)
        bad = (rho >= 1.0) | (cond > COND_LIMIT)
    else:
        eig = np.linalg.eigvalsh(symmetrize(corr))
        lo, hi = eig[..., 0], eig[..., -1]
        bad = (lo <= 0.0) | (hi > COND_LIMIT * lo)
    if np.any(bad):
        raise SingularInnovationError("innovation covariance is numerically singular")


def project_to_obs(
    prior: GaussianBelief,
    model: SystemModel,
    obs_cov: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted observation ``H mean`` and innovation covariance ``H cov H^T + obs_cov``.

    ``obs_cov`` defaults to the model's ``R``; the NUV updates pass their
    inflated diagonal covariance instead.

    Raises
    ------
    SingularInnovationError
        If the innovation covariance is not safely invertible.
    """
    H = model.h_mat
    if obs_cov is None:
        obs_cov = model.r_cov
    y_pred = _mv(H, prior.mean)
    S = symmetrize(H @ prior.cov @ _t(H) + obs_cov)
    _check_innovation_cov(S)
    return y_pred, S


def _gain(cov: np.ndarray, H: np.ndarray, S: np.ndarray) -> np.ndarray:
    cross = cov @ _t(H)  # (..., m, n)
    if S.shape[-1] == 1:
        return cross / S
    # K = P H^T S^-1 without forming the inverse: S K^T = H P
    return _t(np.linalg.solve(S, _t(cross)))


def update(
    prior: GaussianBelief,
    y,
    model: SystemModel,
    obs_cov: np.ndarray | None = None,
) -> tuple[GaussianBelief, UpdateArtifacts]:
    """Measurement update with observation covariance ``obs_cov`` (default ``R``).

    Returns the posterior and the intermediate quantities (predicted
    observation, innovation, innovation covariance, gain).
    """
    y = np.asarray(y, dtype=float)
    y_pred, S = project_to_obs(prior, model, obs_cov)
    innovation = y - y_pred
    K = _gain(prior.cov, model.h_mat, S)
    posterior = GaussianBelief(
        mean=prior.mean + _mv(K, innovation),
        cov=symmetrize(prior.cov - K @ S @ _t(K)),
    )
    return posterior, UpdateArtifacts(y_pred, innovation, S, K)


def initial_belief(model: SystemModel, first_obs, variance: float = DIFFUSE_VARIANCE) -> GaussianBelief:
    """Diffuse starting belief centred on the back-projected first observation.

    The mean is ``pinv(H) y``: observed state components take the observed
    values, unobserved ones start at zero.
    """
    y = np.asarray(first_obs, dtype=float)
    H = model.h_mat
    mean = _mv(np.linalg.pinv(H), y)
    m = model.state_dim
    cov = np.broadcast_to(variance * np.eye(m), mean.shape[:-1] + (m, m)).copy()
    return GaussianBelief(mean, cov)
