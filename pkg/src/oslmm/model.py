"""Data containers and the deterministic mathematics of SLMM/OSLMM.

Array conventions (all numpy, float64):

* observations ``Y``: ``(P, T)``, column ``t`` is ``y_t``
* latents ``F``: ``(Q, T)``
* log-scales ``H``: ``(Q, T)``, ``S^{1/2}(t) = diag(exp(H[:, t]))``
* mixing field ``W`` (SLMM): ``(P, Q, T)``
* basis ``U``: ``(P, Q)`` with orthonormal columns
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "NoiseModel",
    "ProjectedData",
    "RankDeficientError",
    "as_trials",
    "polar_orthonormalize",
    "sign_normalize_columns",
    "project_observations",
    "latent_signal",
    "orthonormalized_latents",
    "slmm_mean",
    "log_likelihood",
]

LOG_2PI = math.log(2.0 * math.pi)


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Dataset:
    """One trial: ``T`` time stamps and a ``P x T`` observation matrix."""

    times: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        Y = np.asarray(self.observations, dtype=float)
        if Y.ndim == 1:
            Y = Y[None, :]
        if Y.ndim != 2:
            raise ValueError(f"observations must be P x T, got shape {Y.shape}")
        if times.size < 1 or Y.shape[0] < 1:
            raise ValueError("need P >= 1 and T >= 1")
        if Y.shape[1] != times.size:
            raise ValueError(f"{times.size} time stamps but {Y.shape[1]} observation columns")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite entries")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("time stamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", Y)

    @property
    def n_channels(self) -> int:
        return self.observations.shape[0]

    @property
    def n_times(self) -> int:
        return self.observations.shape[1]


def as_trials(data) -> list[Dataset]:
    """Normalise a single :class:`Dataset` or a sequence of them to a list
    sharing one time grid."""
    trials = [data] if isinstance(data, Dataset) else list(data)
    if not trials:
        raise ValueError("no trials given")
    ref = trials[0]
    for d in trials[1:]:
        if d.observations.shape != ref.observations.shape or not np.array_equal(d.times, ref.times):
            raise ValueError("all trials must share the same time grid and channel count")
    return trials


@dataclass
class NoiseModel:
    """Gaussian observation noise.

    ``sigma_y2`` is the homogeneous variance (OSLMM).  ``per_channel`` holds the
    diagonal variances used by SLMM; when given it takes precedence.
    """

    sigma_y2: float = 1.0
    per_channel: np.ndarray | None = None

    def __post_init__(self):
        if not (self.sigma_y2 > 0 and math.isfinite(self.sigma_y2)):
            raise ValueError("sigma_y2 must be positive")
        if self.per_channel is not None:
            pc = np.asarray(self.per_channel, dtype=float).ravel()
            if not np.all(pc > 0):
                raise ValueError("per-channel variances must be positive")
            self.per_channel = pc

    def variances(self, n_channels: int) -> np.ndarray:
        if self.per_channel is not None:
            if self.per_channel.size != n_channels:
                raise ValueError("per-channel noise does not match channel count")
            return self.per_channel
        return np.full(n_channels, float(self.sigma_y2))


@dataclass(frozen=True)
class ProjectedData:
    """Projected observations ``T_t y_t`` and their (diagonal) noise variances.

    Row ``q`` of ``projected`` / ``noise_diag`` is the pseudo-observation
    series and its per-time variance for latent ``q``.
    """

    projected: np.ndarray
    noise_diag: np.ndarray = field(repr=False)


def sign_normalize_columns(A):
    """Flip column signs so the largest-magnitude entry of each column is
    positive.  Used wherever an SVD/QR basis is chosen arbitrarily."""
    A = np.array(A, dtype=float, copy=True)
    idx = np.argmax(np.abs(A), axis=0)
    signs = np.sign(A[idx, np.arange(A.shape[1])])
    signs[signs == 0] = 1.0
    return A * signs


def polar_orthonormalize(V) -> np.ndarray:
    """Polar factor ``U = V (V^T V)^{-1/2}``.

    Computed as ``A B^T`` from the thin SVD ``V = A diag(s) B^T``.  This is also
    the semi-orthogonal matrix nearest to ``V`` in Frobenius norm.

    Raises
    ------
    RankDeficientError
        If the smallest singular value is below ``1e-12`` times the largest.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[1] > V.shape[0]:
        raise ValueError(f"expected a tall P x Q matrix, got shape {V.shape}")
    if not np.all(np.isfinite(V)):
        raise RankDeficientError("matrix has non-finite entries")
    A, s, Bt = np.linalg.svd(V, full_matrices=False)
    if s[-1] < 1e-12 * s[0] or s[0] == 0:
        raise RankDeficientError("matrix is (numerically) rank deficient")
    return A @ Bt


def project_observations(data: Dataset, U, H, noise: NoiseModel) -> ProjectedData:
    """Sufficient statistics ``S_t^{-1/2} U^T y_t`` under homogeneous noise.

    The noise of each projected entry is ``sigma_y2 * exp(-2 h_q(t))``.
    """
    Y = data.observations if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    U = np.asarray(U, dtype=float)
    H = np.asarray(H, dtype=float)
    if U.shape[0] != Y.shape[0] or H.shape != (U.shape[1], Y.shape[1]):
        raise ValueError("inconsistent shapes between data, basis and log-scales")
    if noise.per_channel is not None:
        raise ValueError("projection requires homogeneous noise")
    inv_scale = np.exp(-H)
    projected = inv_scale * (U.T @ Y)
    noise_diag = noise.sigma_y2 * inv_scale * inv_scale
    return ProjectedData(projected, noise_diag)


def orthonormalized_latents(H, F) -> np.ndarray:
    """``c(t) = S^{1/2}(t) f(t)``, elementwise ``exp(h_q(t)) f_q(t)``."""
    H = np.asarray(H, dtype=float)
    F = np.asarray(F, dtype=float)
    if H.shape[-2:] != F.shape[-2:]:
        raise ValueError("log-scales and latents must have matching shapes")
    return np.exp(H) * F


def latent_signal(U, H, F) -> np.ndarray:
    """Noise-free OSLMM signal ``g(t) = U S^{1/2}(t) f(t)``."""
    U = np.asarray(U, dtype=float)
    C = orthonormalized_latents(H, F)
    if U.shape[1] != C.shape[-2]:
        raise ValueError("basis and latents disagree on Q")
    return U @ C


def slmm_mean(W, F) -> np.ndarray:
    """SLMM signal ``g_t = W_t f_t`` for every ``t``."""
    W = np.asarray(W, dtype=float)
    F = np.asarray(F, dtype=float)
    if W.ndim != 3 or W.shape[1:] != F.shape:
        raise ValueError("mixing field must be P x Q x T with F of shape Q x T")
    return np.einsum("pqt,qt->pt", W, F)


def log_likelihood(data: Dataset, G, noise: NoiseModel) -> float:
    """``sum_t log N(y_t | g_t, Sigma)`` for diagonal/homogeneous ``Sigma``."""
    Y = data.observations if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    G = np.asarray(G, dtype=float)
    if G.shape != Y.shape:
        raise ValueError(f"mean field shape {G.shape} does not match data {Y.shape}")
    var = noise.variances(Y.shape[0])
    resid = Y - G
    sq = np.sum(resid * resid, axis=1)
    T = Y.shape[1]
    return float(-0.5 * np.sum(sq / var) - 0.5 * T * np.sum(np.log(var)) - 0.5 * Y.size * LOG_2PI)
