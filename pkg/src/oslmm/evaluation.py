"""Latent-recovery error, leave-one-channel-out prediction, power-ordered
rotation, ridge decoding and paired/rank statistics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve

from .model import Dataset
from .samplers import PosteriorSamples, prior_factor

__all__ = [
    "AlignmentResult",
    "EvalReport",
    "RidgeResult",
    "procrustes_align",
    "rmse",
    "delta_rmse",
    "conditional_channel_mean",
    "loco_predict",
    "loco_report",
    "rotate_latents_power",
    "ridge_decode",
    "wilcoxon_signed_rank",
    "summary_stats",
]


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray
    aligned: np.ndarray
    residual_rmse: float


@dataclass
class EvalReport:
    """Collected metrics; missing values are ``None`` (scalars) or NaN (arrays)."""

    rmse: float | None = None
    delta_rmse: float | None = None
    sse: np.ndarray | None = None
    r2: np.ndarray | None = None
    spearman_rho: float | None = None
    t_p_value: float | None = None
    wilcoxon_p_value: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if v is None:
                return None
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return clean({
            "rmse": self.rmse,
            "delta_rmse": self.delta_rmse,
            "sse": self.sse,
            "r2": self.r2,
            "spearman_rho": self.spearman_rho,
            "t_p_value": self.t_p_value,
            "wilcoxon_p_value": self.wilcoxon_p_value,
            **self.extra,
        })


def procrustes_align(estimate, truth) -> AlignmentResult:
    """Orthogonal ``R`` minimising ``||R @ estimate - truth||_F``.

    ``R`` is the polar factor of ``truth @ estimate.T``; reflections and
    permutations are allowed.
    """
    E = np.asarray(estimate, dtype=float)
    T = np.asarray(truth, dtype=float)
    if E.shape != T.shape:
        raise ValueError(f"shape mismatch: {E.shape} vs {T.shape}")
    if not np.any(E):
        raise ValueError("cannot align an all-zero estimate")
    A, _, Bt = np.linalg.svd(T @ E.T)
    R = A @ Bt
    aligned = R @ E
    return AlignmentResult(R, aligned, rmse(aligned, T))


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def delta_rmse(rmse_a: float, rmse_b: float) -> float:
    """``rmse_a - rmse_b``; positive when method ``b`` is better."""
    return float(rmse_a - rmse_b)


# --------------------------------------------------------------------------
# leave-one-channel-out
# --------------------------------------------------------------------------

def conditional_channel_mean(U, H, sigma_y2: float, kern_f, times, Y, channel: int,
                             exclude: bool = True) -> np.ndarray:
    """Predictive mean of the signal of one channel, ``[U S^{1/2} E(f | data)]_p``.

    With ``exclude`` the conditioning set is every other channel.  Dropping
    channel ``p`` removes a rank-``T`` piece from the precision of ``f``;
    starting from the per-latent posteriors given all channels, Woodbury gives
    the prediction as ``sigma (I - A)^{-1} C Sigma b`` with ``A = C Sigma C^T``,
    a ``T x T`` system.  ``Sigma`` is the all-channel posterior covariance,
    ``C`` the held-out channel's loading and ``b`` the natural parameter of
    the remaining channels.
    """
    U = np.asarray(U, dtype=float)
    H = np.asarray(H, dtype=float)
    Y = np.asarray(Y, dtype=float)
    P, Q = U.shape
    T = Y.shape[1]
    if not 0 <= channel < P:
        raise IndexError(f"channel {channel} out of range for {P} channels")
    if Y.shape[0] != P or H.shape != (Q, T):
        raise ValueError("posterior sample and trial shapes disagree")
    Lf = prior_factor(times, kern_f)
    K = Lf.lower @ Lf.lower.T
    sigma = math.sqrt(sigma_y2)
    scale = np.exp(H)
    z = U.T @ Y                                   # (Q, T)
    u_p = U[channel]
    y_p = Y[channel]
    a = scale * u_p[:, None] / sigma              # rows of C, (Q, T)
    m = np.empty((Q, T))
    A = np.zeros((T, T))
    for q in range(Q):
        d = sigma_y2 * np.exp(-2.0 * H[q])        # projected noise variances
        cf = cho_factor(K + np.diag(d), lower=True, check_finite=False)
        # natural parameter of the full-data likelihood for row q
        b = z[q] * scale[q] / sigma_y2
        if exclude:
            b = b - a[q] * y_p / sigma
        # Sigma b with Sigma = D - D (K + D)^{-1} D
        db = d * b
        m[q] = db - d * cho_solve(cf, db, check_finite=False)
        if exclude:
            Sigma = np.diag(d) - d[:, None] * cho_solve(cf, np.diag(d), check_finite=False)
            A += a[q][:, None] * Sigma * a[q][None, :]
    v = np.sum(a * m, axis=0)
    if not exclude:
        return sigma * v
    M = np.eye(T) - A
    try:
        sol = cho_solve(cho_factor(M, lower=True, check_finite=False), v, check_finite=False)
    except np.linalg.LinAlgError:
        sol = np.linalg.solve(M, v)
    return sigma * sol


def loco_predict(posterior: PosteriorSamples, trial: Dataset, channel: int,
                 max_samples: int | None = None) -> np.ndarray:
    """Posterior predictive mean of a held-out channel from the others.

    For every stored sample the shared ``U``, ``H``, noise and latent
    length-scale are used to condition the GP prior of ``f`` on the remaining
    channels of ``trial``; predictions are averaged over samples.
    ``max_samples`` evenly thins the samples used.
    """
    if posterior.kind != "oslmm":
        raise ValueError("leave-one-channel-out prediction needs an OSLMM posterior")
    samples = posterior.samples
    if not samples:
        raise ValueError("posterior has no samples")
    P, Q = samples[0].U.shape
    if trial.n_channels != P or samples[0].H.shape[1] != trial.n_times:
        raise ValueError("trial shape does not match the posterior")
    if not 0 <= channel < P:
        raise IndexError(f"channel {channel} out of range for {P} channels")
    if max_samples is not None and len(samples) > max_samples:
        idx = np.unique(np.linspace(0, len(samples) - 1, max_samples).round().astype(int))
        samples = [samples[i] for i in idx]
    preds = [conditional_channel_mean(s.U, s.H, s.noise.sigma_y2, s.kern_f, trial.times,
                                      trial.observations, channel) for s in samples]
    return np.mean(preds, axis=0)


def loco_report(predictions, truths) -> EvalReport:
    """Per-channel SSE and ``R^2 = 1 - SSE/TSS`` (rows are channels).

    Channels with zero variance get ``R^2 = NaN``.
    """
    pred = np.atleast_2d(np.asarray(predictions, dtype=float))
    truth = np.atleast_2d(np.asarray(truths, dtype=float))
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    sse = np.sum((truth - pred) ** 2, axis=1)
    tss = np.sum((truth - truth.mean(axis=1, keepdims=True)) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(tss > 0, 1.0 - sse / np.where(tss > 0, tss, 1.0), np.nan)
    return EvalReport(sse=sse, r2=r2)


# --------------------------------------------------------------------------
# visualisation rotation and decoding
# --------------------------------------------------------------------------

def rotate_latents_power(latents):
    """Rotate latents so rows carry non-increasing power.

    ``latents`` is one ``(Q, T)`` array or a sequence of them (trials); the
    rotation comes from the SVD of the trials stacked side by side and is
    applied to every trial.  Row signs are fixed so the largest-magnitude
    entry of each stacked row is positive.

    Returns ``(rotated, rotation)`` with ``rotated`` matching the input form.
    """
    single = isinstance(latents, np.ndarray) and latents.ndim == 2
    trials = [np.asarray(latents, dtype=float)] if single else [np.asarray(x, dtype=float) for x in latents]
    if not trials:
        raise ValueError("need at least one trial")
    stacked = np.concatenate(trials, axis=1)
    A = np.linalg.svd(stacked, full_matrices=False)[0]
    R = A.T
    rotated = R @ stacked
    idx = np.argmax(np.abs(rotated), axis=1)
    signs = np.sign(rotated[np.arange(rotated.shape[0]), idx])
    signs[signs == 0] = 1.0
    R = signs[:, None] * R
    out = [R @ x for x in trials]
    return (out[0] if single else out), R


@dataclass(frozen=True)
class RidgeResult:
    r2: float
    lam: float
    fold_errors: dict
    coef: np.ndarray
    intercept: np.ndarray


def _ridge_fit(X, Y, lam):
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    G = Xc.T @ Xc + lam * np.eye(X.shape[1])
    coef = np.linalg.solve(G, Xc.T @ (Y - y_mean))
    return coef, y_mean - x_mean @ coef


def _fold_slices(n, folds):
    bounds = np.linspace(0, n, folds + 1).round().astype(int)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(folds)]


def ridge_decode(latents, targets, lambda_grid=(0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0),
                 folds: int = 5) -> RidgeResult:
    """Cross-validated ridge regression of ``targets`` on latent features.

    ``latents`` is ``(n, d)`` and ``targets`` ``(n,)`` or ``(n, m)``; rows are
    observations.  Features and targets are centred on each training fold.
    The penalty minimising mean squared error over contiguous folds is chosen
    and the pooled out-of-fold ``R^2`` (averaged over target columns) is
    reported.  ``lambda = 0`` is dropped with a warning when the centred
    design is rank deficient.
    """
    X = np.asarray(latents, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValueError("features and targets need the same number of rows")
    if folds < 2 or folds > n:
        raise ValueError("folds must be between 2 and the number of rows")
    grid = [float(l) for l in lambda_grid]
    if any(l < 0 for l in grid) or not grid:
        raise ValueError("lambda grid must be non-empty and non-negative")
    splits = _fold_slices(n, folds)
    if 0.0 in grid:
        ranks = []
        for test in splits:
            train = np.setdiff1d(np.arange(n), test)
            Xt = X[train] - X[train].mean(axis=0)
            ranks.append(np.linalg.matrix_rank(Xt) == X.shape[1])
        if not all(ranks):
            warnings.warn("singular design at lambda=0; excluding it from the grid")
            grid = [l for l in grid if l > 0]
            if not grid:
                raise np.linalg.LinAlgError("singular design and no positive lambda to fall back on")

    fold_errors = {}
    oof = {}
    for lam in grid:
        pred = np.empty_like(Y)
        for test in splits:
            train = np.setdiff1d(np.arange(n), test)
            coef, icpt = _ridge_fit(X[train], Y[train], lam)
            pred[test] = X[test] @ coef + icpt
        fold_errors[lam] = float(np.mean([np.mean((Y[t] - pred[t]) ** 2) for t in splits]))
        oof[lam] = pred
    best = min(grid, key=lambda l: (fold_errors[l], l))
    pred = oof[best]
    ss_res = np.sum((Y - pred) ** 2, axis=0)
    ss_tot = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    r2 = float(np.mean(1.0 - ss_res / ss_tot))
    coef, icpt = _ridge_fit(X, Y, best)
    return RidgeResult(r2, best, fold_errors, coef, icpt)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def wilcoxon_signed_rank(a, b) -> float | None:
    """Two-sided Wilcoxon signed-rank p-value on ``a - b``.

    Zero differences are dropped.  For up to 25 non-zero differences the exact
    sign-flip distribution of the (mid-)rank sum is enumerated by dynamic
    programming; above that a normal approximation with tie correction is
    used.  Returns ``None`` when no non-zero differences remain.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return None
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(np.sum(ranks[d > 0]))
    if n <= 25:
        doubled = np.rint(2 * ranks).astype(int)
        total = int(doubled.sum())
        counts = np.zeros(total + 1)
        counts[0] = 1.0
        for r in doubled:
            counts[r:] = counts[r:] + counts[:-r]
        probs = counts / counts.sum()
        w2 = int(round(2 * w_plus))
        lower = probs[: w2 + 1].sum()
        upper = probs[w2:].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return None
    z = (w_plus - mean) / math.sqrt(var)
    return float(2.0 * stats.norm.sf(abs(z)))


def _spearman(a, b) -> float | None:
    ra = stats.rankdata(a)
    rb = stats.rankdata(b)
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        return None
    return float(np.corrcoef(ra, rb)[0, 1])


def _paired_t(a, b) -> float | None:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        return None
    t = d.mean() / (sd / math.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t), n - 1))


def summary_stats(paired_a, paired_b) -> dict:
    """Spearman correlation, paired t-test and Wilcoxon signed-rank p-values.

    Undefined quantities (constant inputs, all-zero differences) are ``None``.
    """
    a = np.asarray(paired_a, dtype=float).ravel()
    b = np.asarray(paired_b, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError("paired samples must have equal length")
    if a.size < 3:
        raise ValueError("need at least three pairs")
    return {
        "spearman_rho": _spearman(a, b),
        "paired_t_p": _paired_t(a, b),
        "wilcoxon_p": wilcoxon_signed_rank(a, b),
    }
