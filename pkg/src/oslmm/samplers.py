"""MCMC for OSLMM and SLMM.

OSLMM sweep, in order: latent functions ``F`` drawn exactly from their
Gaussian conditional (one independent T-dimensional problem per latent and
trial, thanks to the sufficiency projection), log-scales ``H`` row by row with
elliptical slice sampling, the ambient matrix ``V`` (whose polar factor is the
basis ``U``) with one elliptical slice step, conjugate inverse-Gamma draws of
the noise and log-scale variances, then adaptive Metropolis steps on the
length-scales.

SLMM sweep: one elliptical slice step on the concatenation of every mixing
series ``w_pq`` and every latent series ``f_q``, conjugate draws of the
per-channel noise and of ``sigma_W^2``, adaptive Metropolis on length-scales.

Several trials may be fitted jointly.  They share the mixing parameters
(``U``, ``H`` or ``W``) and hyperparameters; each trial has its own ``F``.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .kernels import (
    CholeskyFactor,
    IllConditionedError,
    KernelParams,
    chol_jitter,
    gram,
    gram_solve,
)
from .model import (
    LOG_2PI,
    NoiseModel,
    RankDeficientError,
    as_trials,
    polar_orthonormalize,
    sign_normalize_columns,
)

__all__ = [
    "HyperPriors",
    "InverseGamma",
    "StepAdapter",
    "GibbsState",
    "ChainConfig",
    "PosteriorSamples",
    "SamplerError",
    "ess_step",
    "prior_factor",
    "latent_posterior_moments",
    "gibbs_update_f",
    "h_row_loglik",
    "gibbs_update_h",
    "gibbs_update_V",
    "noise_variance_posterior",
    "sample_noise_variance",
    "scale_variance_posterior",
    "sample_scale_variance",
    "lengthscale_log_target",
    "mh_update_lengthscale",
    "joint_log_density",
    "oslmm_gibbs_sweep",
    "slmm_ess_sweep",
    "initialize_oslmm",
    "initialize_slmm",
    "run_chain",
]

TWO_PI = 2.0 * math.pi


class SamplerError(RuntimeError):
    """A sweep failed; ``iteration`` records where."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class HyperPriors:
    """Inverse-Gamma hyperpriors: ``IG(a, b)`` on noise variances and
    ``IG(c, d)`` on the GP variance of ``h`` (OSLMM) or ``W`` (SLMM)."""

    a: float = 0.01
    b: float = 0.01
    c: float = 0.01
    d: float = 0.01

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"hyperprior {name} must be positive, got {v}")


@dataclass(frozen=True)
class InverseGamma:
    """``IG(shape, rate)`` with density proportional to ``x^{-shape-1} exp(-rate/x)``."""

    shape: float
    rate: float

    @property
    def mean(self) -> float:
        return self.rate / (self.shape - 1.0) if self.shape > 1 else math.inf

    def sample(self, rng, size=None):
        return self.rate / rng.gamma(self.shape, 1.0, size=size)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return (self.shape * math.log(self.rate) - gammaln(self.shape)
                - (self.shape + 1.0) * np.log(x) - self.rate / x)


@dataclass
class StepAdapter:
    """Batch-adaptive random-walk scale on ``log(length_scale)``.

    During burn-in, after every ``batch_size`` proposals the log step moves by
    ``min(max_delta, n_batches^{-1/2})`` towards the target acceptance rate.
    """

    log_step: float = math.log(0.1)
    target: float = 0.44
    batch_size: int = 50
    max_delta: float = 0.25
    n_batches: int = 0
    batch_accepted: int = 0
    batch_proposed: int = 0
    total_accepted: int = 0
    total_proposed: int = 0

    @property
    def step(self) -> float:
        return math.exp(self.log_step)

    def record(self, accepted: bool, adapt: bool) -> None:
        self.total_proposed += 1
        self.total_accepted += int(accepted)
        if not adapt:
            return
        self.batch_proposed += 1
        self.batch_accepted += int(accepted)
        if self.batch_proposed >= self.batch_size:
            self.n_batches += 1
            delta = min(self.max_delta, self.n_batches ** -0.5)
            rate = self.batch_accepted / self.batch_proposed
            self.log_step += delta if rate > self.target else -delta
            self.batch_accepted = 0
            self.batch_proposed = 0


@dataclass
class GibbsState:
    """One full assignment of latent variables and parameters.

    ``F`` has shape ``(K, Q, T)`` for ``K`` trials.  OSLMM states carry ``H``,
    ``V`` and the derived basis ``U``; SLMM states carry the mixing field ``W``
    of shape ``(P, Q, T)``.
    """

    kind: str
    F: np.ndarray
    noise: NoiseModel
    kern_f: KernelParams
    H: np.ndarray | None = None
    V: np.ndarray | None = None
    U: np.ndarray | None = None
    kern_h: KernelParams | None = None
    W: np.ndarray | None = None
    kern_w: KernelParams | None = None
    adapters: dict = field(default_factory=dict)
    log_density: float = math.nan

    def __post_init__(self):
        if self.kind not in ("oslmm", "slmm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.F = np.asarray(self.F, dtype=float)
        if self.F.ndim == 2:
            self.F = self.F[None]
        if self.kind == "oslmm":
            if self.H is None or self.V is None or self.kern_h is None:
                raise ValueError("OSLMM state needs H, V and kern_h")
            if self.U is None:
                self.U = polar_orthonormalize(self.V)
        elif self.W is None or self.kern_w is None:
            raise ValueError("SLMM state needs W and kern_w")
        for fam in self.families:
            self.adapters.setdefault(fam, StepAdapter())

    @property
    def families(self) -> tuple[str, ...]:
        return ("f", "h") if self.kind == "oslmm" else ("f", "w")

    @property
    def latent_dim(self) -> int:
        return self.F.shape[1]

    def kernel(self, family: str) -> KernelParams:
        return {"f": self.kern_f, "h": self.kern_h, "w": self.kern_w}[family]

    def with_kernel(self, family: str, params: KernelParams) -> "GibbsState":
        key = {"f": "kern_f", "h": "kern_h", "w": "kern_w"}[family]
        return replace(self, **{key: params})

    def copy(self) -> "GibbsState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class ChainConfig:
    """Chain length, burn-in, thinning, seed and per-block switches."""

    iterations: int = 500
    burnin: int = 200
    thinning: int = 1
    seed: int = 0
    update_f: bool = True
    update_h: bool = True
    update_V: bool = True
    update_W: bool = True
    update_noise: bool = True
    update_scale: bool = True
    update_lengthscales: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.thinning < 1 or self.burnin < 0:
            raise ValueError("iterations and thinning must be >= 1, burnin >= 0")
        if self.burnin >= self.iterations:
            raise ValueError(f"burnin ({self.burnin}) must be smaller than iterations ({self.iterations})")

    @property
    def n_samples(self) -> int:
        return (self.iterations - self.burnin) // self.thinning


@dataclass
class PosteriorSamples:
    kind: str
    config: ChainConfig
    samples: list
    log_density: np.ndarray
    times: np.ndarray
    iteration_seconds: np.ndarray | None = None

    def __len__(self):
        return len(self.samples)

    def stack(self, name: str) -> np.ndarray:
        """Stack one field across samples, e.g. ``stack("F")`` -> ``(S, K, Q, T)``.

        Scalars: ``sigma_y2``, ``sigma_p2``, ``length_f``, ``length_h``,
        ``length_w``, ``variance_h``, ``variance_w``.
        """
        getters = {
            "sigma_y2": lambda s: s.noise.sigma_y2,
            "sigma_p2": lambda s: s.noise.variances(s.W.shape[0]),
            "length_f": lambda s: s.kern_f.length_scale,
            "length_h": lambda s: s.kern_h.length_scale,
            "length_w": lambda s: s.kern_w.length_scale,
            "variance_h": lambda s: s.kern_h.variance,
            "variance_w": lambda s: s.kern_w.variance,
        }
        get = getters.get(name, lambda s: getattr(s, name))
        return np.asarray([get(s) for s in self.samples], dtype=float)

    def mean(self, name: str) -> np.ndarray:
        return self.stack(name).mean(axis=0)


def _stack_trials(data) -> tuple[np.ndarray, np.ndarray]:
    trials = as_trials(data)
    return trials[0].times, np.stack([d.observations for d in trials])


@lru_cache(maxsize=64)
def _cached_factor(times_bytes: bytes, variance: float, length_scale: float) -> CholeskyFactor:
    times = np.frombuffer(times_bytes, dtype=float)
    return chol_jitter(gram(times, KernelParams(variance, length_scale)))


def prior_factor(times, params: KernelParams) -> CholeskyFactor:
    """Cached jittered Cholesky factor of the Gram matrix on ``times``."""
    t = np.ascontiguousarray(times, dtype=float)
    return _cached_factor(t.tobytes(), float(params.variance), float(params.length_scale))


def _prior_draw(prior, shape, rng):
    if prior is None:
        return rng.standard_normal(shape)
    if callable(prior) and not isinstance(prior, (np.ndarray, CholeskyFactor)):
        return np.asarray(prior(rng), dtype=float).reshape(shape)
    L = prior.lower if isinstance(prior, CholeskyFactor) else np.asarray(prior, dtype=float)
    z = rng.standard_normal(shape)
    return L @ z


def ess_step(current, prior_factor, loglik, rng, cur_loglik=None):
    """One elliptical slice sampling transition.

    Parameters
    ----------
    current : ndarray
        Current state; any shape.
    prior_factor : CholeskyFactor, ndarray, callable or None
        Describes the zero-mean Gaussian prior: a lower Cholesky factor (applied
        along the first axis), a callable ``rng -> draw``, or ``None`` for a
        standard normal prior.
    loglik : callable
        Log-likelihood of a state.
    rng : numpy.random.Generator
    cur_loglik : float, optional
        ``loglik(current)`` if already known.

    Returns
    -------
    (new_state, new_loglik)
    """
    x = np.asarray(current, dtype=float)
    if cur_loglik is None:
        cur_loglik = loglik(x)
    if not math.isfinite(cur_loglik):
        raise ValueError("log-likelihood at the current state must be finite")
    nu = _prior_draw(prior_factor, x.shape, rng)
    threshold = cur_loglik + math.log1p(-rng.random())
    theta = rng.uniform(0.0, TWO_PI)
    lo, hi = theta - TWO_PI, theta
    while True:
        proposal = x * math.cos(theta) + nu * math.sin(theta)
        ll = loglik(proposal)
        if ll > threshold:
            return proposal, float(ll)
        if theta < 0.0:
            lo = theta
        else:
            hi = theta
        if hi - lo < 1e-14:
            # bracket collapsed onto the current point
            return x.copy(), float(cur_loglik)
        theta = rng.uniform(lo, hi)


# --------------------------------------------------------------------------
# OSLMM blocks
# --------------------------------------------------------------------------

def _projected(state: GibbsState, Y: np.ndarray):
    """Projected data for every trial: ``(K, Q, T)`` values and ``(Q, T)`` noise."""
    inv_scale = np.exp(-state.H)
    proj = inv_scale * np.einsum("pq,kpt->kqt", state.U, Y)
    noise = state.noise.sigma_y2 * inv_scale * inv_scale
    return proj, noise


def latent_posterior_moments(state: GibbsState, data):
    """Mean ``(K, Q, T)`` and covariance ``(Q, T, T)`` of ``F`` given the rest.

    Row ``q`` of trial ``k`` is ``N(K (K + D_q)^{-1} y~_q, K - K (K + D_q)^{-1} K)``
    where ``D_q`` holds the projected noise variances; this equals the
    precision form ``(K^{-1} + D_q^{-1})^{-1}`` without inverting ``K``.
    """
    times, Y = _stack_trials(data)
    proj, noise = _projected(state, Y)
    Lf = prior_factor(times, state.kern_f)
    K = Lf.lower @ Lf.lower.T
    Kdim, Q, T = proj.shape
    mean = np.empty_like(proj)
    cov = np.empty((Q, T, T))
    for q in range(Q):
        cf = cho_factor(K + np.diag(noise[q]), lower=True, check_finite=False)
        mean[:, q, :] = (K @ cho_solve(cf, proj[:, q, :].T, check_finite=False)).T
        cov[q] = K - K @ cho_solve(cf, K, check_finite=False)
    return mean, cov


def gibbs_update_f(state: GibbsState, data, rng) -> np.ndarray:
    """Exact draw of every latent row from its Gaussian conditional.

    Uses the perturbation form: with ``f0 ~ N(0, K)`` and ``e ~ N(0, D_q)``,
    ``f0 + K (K + D_q)^{-1} (y~_q - f0 - e)`` has the conditional law.
    """
    times, Y = _stack_trials(data)
    proj, noise = _projected(state, Y)
    Lf = prior_factor(times, state.kern_f)
    K = Lf.lower @ Lf.lower.T
    Kdim, Q, T = proj.shape
    F = np.empty_like(proj)
    for q in range(Q):
        f0 = Lf.lower @ rng.standard_normal((T, Kdim))
        e = np.sqrt(noise[q])[:, None] * rng.standard_normal((T, Kdim))
        cf = cho_factor(K + np.diag(noise[q]), lower=True, check_finite=False)
        F[:, q, :] = (f0 + K @ cho_solve(cf, proj[:, q, :].T - f0 - e, check_finite=False)).T
    return F


def h_row_loglik(state: GibbsState, Y: np.ndarray, q: int):
    """Log-likelihood of ``h_q`` with the other rows held fixed, up to a constant.

    With orthonormal ``U`` the residual splits across latents, so only
    ``z = (U^T y_t)_q`` and ``f_q`` enter: ``sum_t (z c - c^2 / 2) / sigma^2`` with
    ``c = exp(h_q) f_q``.
    """
    z = np.einsum("p,kpt->kt", state.U[:, q], Y)
    f = state.F[:, q, :]
    inv_var = 1.0 / state.noise.sigma_y2

    def loglik(h):
        c = np.exp(h) * f
        return float(inv_var * np.sum(z * c - 0.5 * c * c))

    return loglik


def gibbs_update_h(state: GibbsState, data, rng) -> np.ndarray:
    """One elliptical slice step per log-scale row, rows visited in order."""
    times, Y = _stack_trials(data)
    Lh = prior_factor(times, state.kern_h)
    H = state.H.copy()
    work = replace(state, H=H)
    for q in range(H.shape[0]):
        loglik = h_row_loglik(work, Y, q)
        H[q], _ = ess_step(H[q], Lh, loglik, rng)
    return H


def _v_loglik(state: GibbsState, Y: np.ndarray):
    C = np.exp(state.H) * state.F                       # (K, Q, T)
    M = np.einsum("kpt,kqt->pq", Y, C)
    inv_var = 1.0 / state.noise.sigma_y2

    def loglik(V):
        try:
            U = polar_orthonormalize(V)
        except RankDeficientError:
            return -math.inf
        return float(inv_var * np.sum(U * M))

    return loglik


def gibbs_update_V(state: GibbsState, data, rng):
    """Elliptical slice step on ``vec(V)`` under a standard matrix-normal prior.

    Returns ``(V, U)`` with ``U`` the polar factor of the new ``V``.  A
    rank-deficient proposal is treated as off-slice and the bracket shrinks.
    """
    _, Y = _stack_trials(data)
    V, _ = ess_step(state.V, None, _v_loglik(state, Y), rng)
    return V, polar_orthonormalize(V)


# --------------------------------------------------------------------------
# conjugate and Metropolis hyperparameter blocks
# --------------------------------------------------------------------------

def _mean_field(state: GibbsState) -> np.ndarray:
    if state.kind == "oslmm":
        return np.einsum("pq,kqt->kpt", state.U, np.exp(state.H) * state.F)
    return np.einsum("pqt,kqt->kpt", state.W, state.F)


def noise_variance_posterior(state: GibbsState, data, priors: HyperPriors):
    """Conditional posterior of the noise variance(s).

    OSLMM: ``IG(a + KPT/2, b + RSS/2)``.  SLMM: one ``IG(a + KT/2, b + RSS_p/2)``
    per channel.  ``K`` is the number of trials (1 for a single dataset).
    """
    _, Y = _stack_trials(data)
    resid = Y - _mean_field(state)
    if state.kind == "oslmm":
        return InverseGamma(priors.a + 0.5 * Y.size, priors.b + 0.5 * float(np.sum(resid * resid)))
    Kdim, P, T = Y.shape
    rss = np.sum(resid * resid, axis=(0, 2))
    return [InverseGamma(priors.a + 0.5 * Kdim * T, priors.b + 0.5 * float(r)) for r in rss]


def sample_noise_variance(state: GibbsState, data, priors: HyperPriors, rng):
    post = noise_variance_posterior(state, data, priors)
    if isinstance(post, InverseGamma):
        return float(post.sample(rng))
    return np.array([float(p.sample(rng)) for p in post])


def scale_variance_posterior(state: GibbsState, times, priors: HyperPriors) -> InverseGamma:
    """Conditional posterior of ``sigma_h^2`` (OSLMM) or ``sigma_W^2`` (SLMM).

    Quadratic forms use the unit-variance correlation Gram ``K~``; on regular
    grids the solve goes through the Levinson recursion.
    """
    times = np.asarray(times, dtype=float)
    if state.kind == "oslmm":
        series = state.H.T                                  # (T, Q)
        ls = state.kern_h.length_scale
    else:
        series = state.W.reshape(-1, state.W.shape[-1]).T   # (T, P*Q)
        ls = state.kern_w.length_scale
    corr = KernelParams(1.0, ls)
    solved = gram_solve(times, corr, series, factor=prior_factor(times, corr))
    quad = float(np.sum(series * solved))
    return InverseGamma(priors.c + 0.5 * series.size, priors.d + 0.5 * quad)


def sample_scale_variance(state: GibbsState, times, priors: HyperPriors, rng) -> float:
    return float(scale_variance_posterior(state, times, priors).sample(rng))


def _family_series(state: GibbsState, family: str) -> np.ndarray:
    """All series governed by one kernel family, as columns of a ``(T, n)`` array."""
    if family == "f":
        return state.F.reshape(-1, state.F.shape[-1]).T
    if family == "h":
        return state.H.T
    if family == "w":
        return state.W.reshape(-1, state.W.shape[-1]).T
    raise ValueError(f"unknown kernel family {family!r}")


def _gp_logpdf(series: np.ndarray, factor: CholeskyFactor) -> float:
    T, n = series.shape
    return -0.5 * (factor.quad_form(series) + n * factor.logdet() + n * T * LOG_2PI)


def lengthscale_log_target(state: GibbsState, family: str, times, length_scale: float) -> float:
    """Log conditional density of ``log(length_scale)`` up to a constant.

    The prior ``p(l^2) ~ 1/l^2`` is flat in ``log l``, so this is the GP prior
    density of the family's series.  Returns ``-inf`` if the Gram matrix
    cannot be factorized.
    """
    params = KernelParams(state.kernel(family).variance, length_scale)
    try:
        factor = prior_factor(times, params)
    except IllConditionedError:
        return -math.inf
    return _gp_logpdf(_family_series(state, family), factor)


def mh_update_lengthscale(state: GibbsState, which: str, times, rng, adapt: bool = False) -> float:
    """One random-walk Metropolis step on ``log(length_scale)`` of a family.

    The proposal is symmetric in ``log l`` and the prior is flat there, so the
    acceptance ratio is the ratio of GP prior densities.  Acceptance is
    recorded in ``state.adapters[which]`` (step size adapts only when
    ``adapt`` is true).
    """
    adapter = state.adapters[which]
    current = state.kernel(which).length_scale
    proposal = current * math.exp(adapter.step * rng.standard_normal())
    log_u = math.log1p(-rng.random())
    cur = lengthscale_log_target(state, which, times, current)
    new = lengthscale_log_target(state, which, times, proposal)
    accepted = math.isfinite(new) and log_u < new - cur
    adapter.record(accepted, adapt)
    return proposal if accepted else current


def joint_log_density(state: GibbsState, data, priors: HyperPriors) -> float:
    """Joint log density of data, latent variables and parameters.

    Includes the GP priors of every latent series, the matrix-normal prior of
    ``V`` (OSLMM) and the inverse-Gamma hyperpriors.  Length-scales carry a
    flat prior in log space and contribute nothing.
    """
    times, Y = _stack_trials(data)
    resid = Y - _mean_field(state)
    Kdim, P, T = Y.shape
    var = state.noise.variances(P)
    lp = float(-0.5 * np.sum(np.sum(resid * resid, axis=(0, 2)) / var)
               - 0.5 * Kdim * T * np.sum(np.log(var)) - 0.5 * Y.size * LOG_2PI)
    lp += _gp_logpdf(_family_series(state, "f"), prior_factor(times, state.kern_f))
    if state.kind == "oslmm":
        lp += _gp_logpdf(_family_series(state, "h"), prior_factor(times, state.kern_h))
        lp += float(-0.5 * np.sum(state.V * state.V) - 0.5 * state.V.size * LOG_2PI)
        lp += float(InverseGamma(priors.a, priors.b).logpdf(state.noise.sigma_y2))
        lp += float(InverseGamma(priors.c, priors.d).logpdf(state.kern_h.variance))
    else:
        lp += _gp_logpdf(_family_series(state, "w"), prior_factor(times, state.kern_w))
        lp += float(np.sum(InverseGamma(priors.a, priors.b).logpdf(var)))
        lp += float(InverseGamma(priors.c, priors.d).logpdf(state.kern_w.variance))
    return lp


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

_DEFAULT_FLAGS = ChainConfig()


def oslmm_gibbs_sweep(state: GibbsState, data, priors: HyperPriors, rng,
                      config: ChainConfig | None = None, adapt: bool = False) -> GibbsState:
    """One OSLMM Gibbs sweep; returns a new state with its joint log density."""
    flags = config or _DEFAULT_FLAGS
    enabled = (flags.update_f, flags.update_h, flags.update_V, flags.update_noise,
               flags.update_scale, flags.update_lengthscales)
    new = state.copy()
    if not any(enabled):
        return new
    times, _ = _stack_trials(data)
    if flags.update_f:
        new.F = gibbs_update_f(new, data, rng)
    if flags.update_h:
        new.H = gibbs_update_h(new, data, rng)
    if flags.update_V:
        new.V, new.U = gibbs_update_V(new, data, rng)
    if flags.update_noise:
        new.noise = NoiseModel(sample_noise_variance(new, data, priors, rng))
    if flags.update_scale:
        new.kern_h = KernelParams(sample_scale_variance(new, times, priors, rng),
                                  new.kern_h.length_scale)
    if flags.update_lengthscales:
        for fam in ("f", "h"):
            ls = mh_update_lengthscale(new, fam, times, rng, adapt=adapt)
            new = new.with_kernel(fam, KernelParams(new.kernel(fam).variance, ls))
    new.log_density = joint_log_density(new, data, priors)
    return new


def _slmm_loglik(Y: np.ndarray, var: np.ndarray):
    inv_var = (1.0 / var)[None, :, None]

    def loglik(W, F):
        resid = Y - np.einsum("pqt,kqt->kpt", W, F)
        return float(-0.5 * np.sum(resid * resid * inv_var))

    return loglik


def slmm_ess_sweep(state: GibbsState, data, priors: HyperPriors, rng,
                   config: ChainConfig | None = None, adapt: bool = False) -> GibbsState:
    """One SLMM sweep: joint elliptical slice step on ``(W, F)`` then hyperparameters."""
    flags = config or _DEFAULT_FLAGS
    new = state.copy()
    enabled = (flags.update_W or flags.update_f, flags.update_noise,
               flags.update_scale, flags.update_lengthscales)
    if not any(enabled):
        return new
    times, Y = _stack_trials(data)
    if flags.update_W or flags.update_f:
        Lw = prior_factor(times, new.kern_w).lower
        Lf = prior_factor(times, new.kern_f).lower
        shape_w, shape_f = new.W.shape, new.F.shape
        nw = new.W.size if flags.update_W else 0

        def draw(g):
            parts = []
            if flags.update_W:
                parts.append(np.einsum("ts,pqs->pqt", Lw, g.standard_normal(shape_w)).ravel())
            if flags.update_f:
                parts.append(np.einsum("ts,kqs->kqt", Lf, g.standard_normal(shape_f)).ravel())
            return np.concatenate(parts)

        # disabled blocks stay fixed and are not part of the ellipse
        W_fixed, F_fixed = new.W, new.F

        def split(x):
            W = x[:nw].reshape(shape_w) if flags.update_W else W_fixed
            F = x[nw:].reshape(shape_f) if flags.update_f else F_fixed
            return W, F

        x0 = np.concatenate(([new.W.ravel()] if flags.update_W else [])
                            + ([new.F.ravel()] if flags.update_f else []))
        base = _slmm_loglik(Y, new.noise.variances(Y.shape[1]))
        x, _ = ess_step(x0, draw, lambda x: base(*split(x)), rng)
        new.W, new.F = split(x)
    if flags.update_noise:
        new.noise = NoiseModel(new.noise.sigma_y2, sample_noise_variance(new, data, priors, rng))
    if flags.update_scale:
        new.kern_w = KernelParams(sample_scale_variance(new, times, priors, rng),
                                  new.kern_w.length_scale)
    if flags.update_lengthscales:
        for fam in ("f", "w"):
            ls = mh_update_lengthscale(new, fam, times, rng, adapt=adapt)
            new = new.with_kernel(fam, KernelParams(new.kernel(fam).variance, ls))
    new.log_density = joint_log_density(new, data, priors)
    return new


# --------------------------------------------------------------------------
# initialisation and chain driver
# --------------------------------------------------------------------------

def _svd_start(Y: np.ndarray, latent_dim: int) -> np.ndarray:
    Kdim, P, T = Y.shape
    if not 1 <= latent_dim <= P:
        raise ValueError(f"latent_dim must be in [1, {P}], got {latent_dim}")
    flat = np.concatenate(list(Y), axis=1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    A = np.linalg.svd(flat, full_matrices=False)[0]
    return sign_normalize_columns(A[:, :latent_dim])


def _default_length(times) -> float:
    span = float(times[-1] - times[0]) if len(times) > 1 else 1.0
    return span / 10.0


def initialize_oslmm(data, latent_dim: int, *, length_f: float | None = None,
                     length_h: float | None = None, variance_h: float = 1.0) -> GibbsState:
    """Deterministic start: ``U`` from the top left singular vectors of the
    centred data, ``H = 0``, ``F`` the projected data, noise variance a tenth
    of the data variance, length-scales a tenth of the time span."""
    times, Y = _stack_trials(data)
    U = _svd_start(Y, latent_dim)
    F = np.einsum("pq,kpt->kqt", U, Y)
    length = _default_length(times)
    return GibbsState(
        kind="oslmm",
        F=F,
        H=np.zeros((latent_dim, Y.shape[2])),
        V=U.copy(),
        U=U.copy(),
        noise=NoiseModel(0.1 * float(np.var(Y))),
        kern_f=KernelParams(1.0, length_f or length),
        kern_h=KernelParams(variance_h, length_h or length),
    )


def initialize_slmm(data, latent_dim: int, *, length_f: float | None = None,
                    length_w: float | None = None, variance_w: float = 1.0) -> GibbsState:
    """SVD start as for OSLMM with ``W_t = U`` at every time."""
    times, Y = _stack_trials(data)
    U = _svd_start(Y, latent_dim)
    T = Y.shape[2]
    length = _default_length(times)
    per_channel = 0.1 * np.var(Y, axis=(0, 2))
    per_channel = np.where(per_channel > 0, per_channel, 0.1 * max(float(np.var(Y)), 1e-12))
    return GibbsState(
        kind="slmm",
        F=np.einsum("pq,kpt->kqt", U, Y),
        W=np.repeat(U[:, :, None], T, axis=2),
        noise=NoiseModel(float(np.mean(per_channel)), per_channel),
        kern_f=KernelParams(1.0, length_f or length),
        kern_w=KernelParams(variance_w, length_w or length),
    )


def _snapshot(state: GibbsState) -> GibbsState:
    snap = state.copy()
    snap.adapters = {}
    return snap


def run_chain(kind: str, data, config: ChainConfig, priors: HyperPriors,
              init: GibbsState, progress=None) -> PosteriorSamples:
    """Run a chain, discard burn-in, keep every ``thinning``-th state.

    ``progress`` is an optional callable ``(iteration, state)`` invoked after
    each sweep.
    """
    if kind != init.kind:
        raise ValueError(f"initial state is {init.kind!r}, chain asked for {kind!r}")
    sweep = oslmm_gibbs_sweep if kind == "oslmm" else slmm_ess_sweep
    rng = np.random.default_rng(config.seed)
    times, _ = _stack_trials(data)
    state = init.copy()
    trace = np.empty(config.iterations)
    seconds = np.empty(config.iterations)
    kept = []
    for it in range(config.iterations):
        start = time.perf_counter()
        try:
            state = sweep(state, data, priors, rng, config=config, adapt=it < config.burnin)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            raise SamplerError(f"sweep failed at iteration {it}: {exc}", iteration=it) from exc
        seconds[it] = time.perf_counter() - start
        if not math.isfinite(state.log_density):
            state.log_density = joint_log_density(state, data, priors)
        if not math.isfinite(state.log_density):
            raise SamplerError(f"non-finite joint log density at iteration {it}", iteration=it)
        trace[it] = state.log_density
        j = it - config.burnin
        if j >= 0 and (j + 1) % config.thinning == 0:
            kept.append(_snapshot(state))
        if progress is not None:
            progress(it, state)
    return PosteriorSamples(kind, config, kept, trace, np.array(times), seconds)
