"""Input-dependent Lorenz benchmark.

Observations are ``y_t = U (exp(h_t) * f_t) + eta_t`` where ``f`` is a
standardised Lorenz trajectory, each log-scale row ``h_q`` is a GP draw with
one of three squared-exponential kernels, ``U`` is a random semi-orthogonal
basis and ``eta_t ~ N(0, noise_std^2 I)``.  The multi-subspace variant gives
every trial its own basis, the semi-orthogonal matrix nearest to a perturbed
copy of a shared one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import KernelParams, chol_jitter, gram
from .model import Dataset, latent_signal, polar_orthonormalize

__all__ = [
    "LorenzConfig",
    "DgpConfig",
    "MdgpConfig",
    "SyntheticBundle",
    "SCALE_KERNELS",
    "PERTURB_LEVELS",
    "integrate_lorenz",
    "lorenz_trajectory",
    "sample_log_scales",
    "random_semiorthogonal",
    "generate_dgp",
    "generate_dgp_trials",
    "generate_mdgp",
]

# length-scales of the short / median / long log-scale kernels
SCALE_KERNELS = {"short": 1.0, "median": math.e, "long": math.e ** 2}
PERTURB_LEVELS = (0.01, 0.02, 0.05, 0.1)
BLOWUP = 1e6


@dataclass(frozen=True)
class LorenzConfig:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    n_steps: int = 1000
    transient_discard: int = 1000
    initial_state: tuple = (1.0, 1.0, 1.0)
    stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1 or self.transient_discard < 0 or self.stride < 1:
            raise ValueError("n_steps and stride must be >= 1, transient_discard >= 0")
        if len(self.initial_state) != 3:
            raise ValueError("initial_state must have three entries")


@dataclass(frozen=True)
class DgpConfig:
    """Single-subspace generator settings.

    Time stamps are ``dt * stride * arange(n_times)`` in Lorenz time units, the
    same units the log-scale kernels' length-scales are expressed in.
    ``n_trials`` trials share ``U`` and ``h`` and differ in ``f`` and noise.
    """

    n_times: int = 200
    n_channels: int = 50
    latent_dim: int = 3
    scale_kernel: str = "median"
    noise_std: float = 0.1
    seed: int = 0
    n_trials: int = 1
    lorenz: LorenzConfig = field(default_factory=lambda: LorenzConfig(stride=5))

    def __post_init__(self):
        if self.latent_dim != 3:
            raise ValueError("the Lorenz generator has exactly three latent dimensions")
        if self.n_channels < self.latent_dim:
            raise ValueError("need n_channels >= latent_dim")
        if self.scale_kernel not in SCALE_KERNELS:
            raise ValueError(f"scale_kernel must be one of {sorted(SCALE_KERNELS)}")
        if self.noise_std < 0 or self.n_times < 1 or self.n_trials < 1:
            raise ValueError("noise_std must be >= 0, n_times and n_trials >= 1")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_times) * (self.lorenz.dt * self.lorenz.stride)


@dataclass(frozen=True)
class MdgpConfig:
    base: DgpConfig = field(default_factory=DgpConfig)
    n_trials: int = 20
    perturb_sigma: float = 0.01

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if not self.perturb_sigma >= 0:
            raise ValueError("perturb_sigma must be >= 0")


@dataclass(frozen=True)
class SyntheticBundle:
    """A generated trial together with the truth that produced it."""

    dataset: Dataset
    latents: np.ndarray      # (3, T), standardised Lorenz
    log_scales: np.ndarray   # (3, T)
    basis: np.ndarray        # (P, 3)
    noise: np.ndarray        # (P, T), the eta_t actually added

    def signal(self) -> np.ndarray:
        return latent_signal(self.basis, self.log_scales, self.latents)


def _lorenz_rhs(s, sigma, rho, beta):
    x, y, z = s
    return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])


def integrate_lorenz(config: LorenzConfig) -> np.ndarray:
    """Raw RK4 trajectory, ``3 x n_steps``, after the transient, before
    subsampling or standardisation."""
    s = np.array(config.initial_state, dtype=float)
    p = (config.sigma, config.rho, config.beta)
    h = config.dt
    total = config.transient_discard + config.n_steps
    out = np.empty((3, config.n_steps))
    for i in range(total):
        k1 = _lorenz_rhs(s, *p)
        k2 = _lorenz_rhs(s + 0.5 * h * k1, *p)
        k3 = _lorenz_rhs(s + 0.5 * h * k2, *p)
        k4 = _lorenz_rhs(s + h * k3, *p)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.abs(s) < BLOWUP):
            raise FloatingPointError(f"Lorenz integration diverged at step {i}")
        j = i - config.transient_discard
        if j >= 0:
            out[:, j] = s
    return out


def lorenz_trajectory(config: LorenzConfig) -> np.ndarray:
    """Subsampled Lorenz trajectory with every dimension standardised.

    ``n_steps`` counts integration steps; every ``stride``-th is kept, and
    standardisation is applied after subsampling.
    """
    raw = integrate_lorenz(config)[:, config.stride - 1::config.stride]
    mean = raw.mean(axis=1, keepdims=True)
    centred = raw - mean
    std = np.sqrt(np.mean(centred * centred, axis=1, keepdims=True))
    return centred / std


def sample_log_scales(kind: str, times, rng, n_rows: int = 3) -> np.ndarray:
    """``n_rows`` independent draws from a unit-variance SE GP with the
    length-scale of the named kernel."""
    if kind not in SCALE_KERNELS:
        raise ValueError(f"kind must be one of {sorted(SCALE_KERNELS)}")
    factor = chol_jitter(gram(times, KernelParams(1.0, SCALE_KERNELS[kind])))
    z = rng.standard_normal((factor.size, n_rows))
    return (factor.lower @ z).T


def random_semiorthogonal(P: int, Q: int, rng) -> np.ndarray:
    """Uniform draw on the Stiefel manifold via QR of a Gaussian matrix,
    with column signs fixed by the diagonal of ``R``."""
    if Q > P:
        raise ValueError("need P >= Q")
    Qm, R = np.linalg.qr(rng.standard_normal((P, Q)))
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Qm * signs


def _make_trial(times, basis, log_scales, lorenz: LorenzConfig, noise_std, rng) -> SyntheticBundle:
    start = np.asarray(lorenz.initial_state, dtype=float) + rng.standard_normal(3)
    traj_cfg = LorenzConfig(
        sigma=lorenz.sigma, rho=lorenz.rho, beta=lorenz.beta, dt=lorenz.dt,
        n_steps=len(times) * lorenz.stride, transient_discard=lorenz.transient_discard,
        initial_state=tuple(start), stride=lorenz.stride,
    )
    latents = lorenz_trajectory(traj_cfg)
    noise = noise_std * rng.standard_normal((basis.shape[0], len(times)))
    Y = latent_signal(basis, log_scales, latents) + noise
    return SyntheticBundle(Dataset(times, Y), latents, log_scales, basis, noise)


def generate_dgp(config: DgpConfig, rng=None) -> SyntheticBundle:
    """Generate one trial: basis, log-scales, latents and noise."""
    return generate_dgp_trials(replace(config, n_trials=1), rng)[0]


def generate_dgp_trials(config: DgpConfig, rng=None) -> list[SyntheticBundle]:
    """Generate ``config.n_trials`` trials sharing one basis and one set of
    log-scales.  Each trial starts the Lorenz flow from a randomly perturbed
    initial state so trials have distinct latents."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    times = config.times
    basis = random_semiorthogonal(config.n_channels, config.latent_dim, rng)
    log_scales = sample_log_scales(config.scale_kernel, times, rng, config.latent_dim)
    return [_make_trial(times, basis, log_scales, config.lorenz, config.noise_std, rng)
            for _ in range(config.n_trials)]


def generate_mdgp(config: MdgpConfig, rng=None) -> list[SyntheticBundle]:
    """Multi-subspace generator: trial ``i`` uses the polar factor of
    ``U + sigma E_i`` and its own latents, log-scales and noise."""
    base = config.base
    rng = np.random.default_rng(base.seed) if rng is None else rng
    times = base.times
    U = random_semiorthogonal(base.n_channels, base.latent_dim, rng)
    bundles = []
    for _ in range(config.n_trials):
        E = rng.standard_normal(U.shape)
        Ui = polar_orthonormalize(U + config.perturb_sigma * E) if config.perturb_sigma > 0 else U.copy()
        H = sample_log_scales(base.scale_kernel, times, rng, base.latent_dim)
        bundles.append(_make_trial(times, Ui, H, base.lorenz, base.noise_std, rng))
    return bundles
