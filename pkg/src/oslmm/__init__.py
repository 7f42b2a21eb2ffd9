"""Bayesian multi-output time-series regression with stochastic linear mixing
(SLMM) and its orthogonal variant (OSLMM)."""
from .kernels import KernelParams, chol_jitter, gram, gram_solve, se_kernel, toeplitz_solve
from .model import Dataset, NoiseModel, polar_orthonormalize, project_observations
from .samplers import (
    ChainConfig,
    GibbsState,
    HyperPriors,
    PosteriorSamples,
    initialize_oslmm,
    initialize_slmm,
    run_chain,
)

__version__ = "0.1.0"

__all__ = [
    "KernelParams",
    "chol_jitter",
    "gram",
    "gram_solve",
    "se_kernel",
    "toeplitz_solve",
    "Dataset",
    "NoiseModel",
    "polar_orthonormalize",
    "project_observations",
    "ChainConfig",
    "GibbsState",
    "HyperPriors",
    "PosteriorSamples",
    "initialize_oslmm",
    "initialize_slmm",
    "run_chain",
]
