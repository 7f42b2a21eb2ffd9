"""Squared-exponential covariances, Gram matrices and the factor/solve routines
built on them.

Every covariance in the package goes through :func:`chol_jitter`; explicit
inverses are never formed.  For regularly sampled inputs the Gram matrix is
Toeplitz and :func:`toeplitz_solve` gives an O(T^2) Levinson solve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular, toeplitz

__all__ = [
    "KernelParams",
    "CholeskyFactor",
    "IllConditionedError",
    "ToeplitzBreakdown",
    "JITTER_LADDER",
    "se_kernel",
    "gram",
    "is_regular_grid",
    "chol_jitter",
    "toeplitz_solve",
    "gram_solve",
]

# Relative to the mean diagonal of the matrix being factorized.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class IllConditionedError(np.linalg.LinAlgError):
    """Raised when a Gram matrix cannot be factorized even at maximum jitter."""


class ToeplitzBreakdown(np.linalg.LinAlgError):
    """Raised when the Levinson recursion meets a non-positive pivot."""


@dataclass(frozen=True)
class KernelParams:
    """Signal variance and length-scale of a squared-exponential kernel."""

    variance: float = 1.0
    length_scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.variance) and self.variance >= 0):
            raise ValueError(f"variance must be finite and >= 0, got {self.variance}")
        if not (math.isfinite(self.length_scale) and self.length_scale > 0):
            raise ValueError(f"length_scale must be finite and > 0, got {self.length_scale}")


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower factor of ``G + jitter * I``."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return self.lower.shape[0]

    def solve(self, rhs):
        """Solve ``(G + jitter I) x = rhs``."""
        return cho_solve((self.lower, True), rhs, check_finite=False)

    def whiten(self, rhs):
        """Return ``L^{-1} rhs``."""
        return solve_triangular(self.lower, rhs, lower=True, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def quad_form(self, x) -> float:
        """``x^T (G + jitter I)^{-1} x`` summed over columns of ``x``."""
        z = self.whiten(x)
        return float(np.sum(z * z))


def se_kernel(t1: float, t2: float, params: KernelParams) -> float:
    """Squared-exponential covariance between two time points."""
    if not (math.isfinite(t1) and math.isfinite(t2)):
        raise ValueError("kernel inputs must be finite")
    d = t1 - t2
    return params.variance * math.exp(-d * d / (2.0 * params.length_scale ** 2))


def is_regular_grid(inputs, rtol: float = 1e-9) -> bool:
    t = np.asarray(inputs, dtype=float)
    if t.size < 3:
        return True
    steps = np.diff(t)
    return bool(np.allclose(steps, steps[0], rtol=rtol, atol=0.0))


def gram(inputs, params: KernelParams) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(t_i, t_j)``.

    The result is exactly symmetric.  For evenly spaced inputs it is built
    from lags so that the Toeplitz identity ``K[i, j] == K[i+1, j+1]`` holds
    bitwise.
    """
    t = np.asarray(inputs, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("gram needs at least one input")
    if not np.all(np.isfinite(t)):
        raise ValueError("kernel inputs must be finite")
    scale = 2.0 * params.length_scale ** 2
    if t.size > 1 and is_regular_grid(t):
        step = (t[-1] - t[0]) / (t.size - 1)
        lags = np.arange(t.size) * step
        return toeplitz(params.variance * np.exp(-lags * lags / scale))
    d = np.subtract.outer(t, t)
    return params.variance * np.exp(-d * d / scale)


def chol_jitter(G) -> CholeskyFactor:
    """Cholesky factor with an escalating diagonal jitter.

    Jitter levels follow :data:`JITTER_LADDER`, scaled by the mean diagonal.
    Raises :class:`IllConditionedError` when the last level still fails.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise IllConditionedError("Gram matrix has non-finite entries")
    scale = float(np.mean(np.diag(G)))
    if not scale > 0:
        scale = 1.0
    eye = np.eye(G.shape[0])
    for level in JITTER_LADDER:
        jitter = level * scale
        try:
            L = np.linalg.cholesky(G + jitter * eye if jitter else G)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(L, jitter)
    raise IllConditionedError(
        f"factorization failed with jitter up to {JITTER_LADDER[-1] * scale:.3g}; "
        "kernel parameters are ill-conditioned"
    )


def toeplitz_solve(first_row, rhs) -> np.ndarray:
    """Solve a symmetric positive-definite Toeplitz system by Levinson recursion.

    Parameters
    ----------
    first_row : array_like, shape (T,)
        First row (equivalently column) of the Toeplitz matrix.
    rhs : array_like, shape (T,) or (T, m)

    Returns
    -------
    ndarray with the shape of ``rhs``.

    Raises
    ------
    ToeplitzBreakdown
        If a reflection pivot becomes non-positive (the matrix is numerically
        not positive definite); callers fall back to a dense factorization.
    """
    r = np.asarray(first_row, dtype=float).ravel()
    b = np.asarray(rhs, dtype=float)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    n = r.size
    if b.shape[0] != n:
        raise ValueError(f"rhs has {b.shape[0]} rows, Toeplitz matrix has order {n}")
    r0 = r[0]
    if not r0 > 0:
        raise ToeplitzBreakdown("leading entry must be positive")
    # normalise to unit diagonal
    r = r[1:] / r0
    b = b / r0

    x = np.empty_like(b)
    x[0] = b[0]
    if n == 1:
        return x[:, 0] if vector_rhs else x
    y = np.empty(n - 1)
    y[0] = -r[0]
    alpha = -r[0]
    beta = 1.0
    for k in range(1, n):
        beta *= 1.0 - alpha * alpha
        if not beta > 0:
            raise ToeplitzBreakdown(f"non-positive pivot at order {k}")
        # r[:k] @ x[k-1::-1] for every right-hand side
        mu = (b[k] - r[:k] @ x[k - 1::-1]) / beta
        x[:k] += mu * y[k - 1::-1, None]
        x[k] = mu
        if k < n - 1:
            alpha = -(r[k] + r[:k] @ y[k - 1::-1]) / beta
            y[:k] = y[:k] + alpha * y[k - 1::-1]
            y[k] = alpha
    return x[:, 0] if vector_rhs else x


def gram_solve(inputs, params: KernelParams, rhs, factor: CholeskyFactor | None = None):
    """Solve ``(K + jitter I) x = rhs`` taking the Levinson path when possible.

    The jitter is the one :func:`chol_jitter` settles on, so the Toeplitz and
    dense routes solve the same system.
    """
    if factor is None:
        factor = chol_jitter(gram(inputs, params))
    if is_regular_grid(inputs):
        K = gram(inputs, params)
        row = K[0].copy()
        row[0] += factor.jitter
        try:
            return toeplitz_solve(row, rhs)
        except ToeplitzBreakdown:
            pass
    return factor.solve(rhs)
