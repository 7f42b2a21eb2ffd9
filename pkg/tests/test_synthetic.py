import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from oslmm.kernels import KernelParams, gram
from oslmm.model import latent_signal, polar_orthonormalize
from oslmm.synthetic import (
    PERTURB_LEVELS,
    SCALE_KERNELS,
    DgpConfig,
    LorenzConfig,
    MdgpConfig,
    generate_dgp,
    generate_dgp_trials,
    generate_mdgp,
    integrate_lorenz,
    lorenz_trajectory,
    random_semiorthogonal,
    sample_log_scales,
)


class TestLorenz:
    def test_default_parameters(self):
        c = LorenzConfig()
        assert (c.sigma, c.rho, c.beta) == (10.0, 28.0, 8.0 / 3.0)

    def test_standardised(self):
        f = lorenz_trajectory(LorenzConfig(n_steps=1500, stride=3))
        assert f.shape == (3, 500)
        assert np.all(np.abs(f.mean(axis=1)) < 1e-10)
        assert np.all(np.abs(f.var(axis=1) - 1.0) < 1e-10)

    def test_deterministic(self):
        c = LorenzConfig(n_steps=200)
        np.testing.assert_array_equal(integrate_lorenz(c), integrate_lorenz(c))

    def test_fourth_order_convergence(self):
        # short horizon (0.5 time units) without transient, well inside one Lyapunov time
        def endpoint(dt):
            n = int(round(0.5 / dt))
            return integrate_lorenz(LorenzConfig(dt=dt, n_steps=n, transient_discard=0,
                                                 initial_state=(1.0, 1.0, 1.0)))[:, -1]
        ref = endpoint(0.01 / 16)
        e1 = np.linalg.norm(endpoint(0.01) - ref)
        e2 = np.linalg.norm(endpoint(0.005) - ref)
        assert 10 < e1 / e2 < 22

    def test_blow_up_aborts(self):
        with pytest.raises(FloatingPointError):
            integrate_lorenz(LorenzConfig(dt=0.5, n_steps=100, transient_discard=0))

    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(n_steps=0), dict(stride=0),
                                    dict(transient_discard=-1), dict(initial_state=(1.0, 2.0))])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            LorenzConfig(**kw)


class TestLogScales:
    def test_length_scales(self):
        assert SCALE_KERNELS == {"short": 1.0, "median": math.e, "long": math.e ** 2}

    def test_kernel_values(self):
        for ls in SCALE_KERNELS.values():
            assert gram([0.0], KernelParams(1.0, ls))[0, 0] == 1.0
        short = gram([0.0, 1.0], KernelParams(1.0, SCALE_KERNELS["short"]))[0, 1]
        long = gram([0.0, math.e ** 2], KernelParams(1.0, SCALE_KERNELS["long"]))[0, 1]
        assert short == pytest.approx(math.exp(-0.5), rel=1e-14)
        assert long == pytest.approx(math.exp(-0.5), rel=1e-14)

    @pytest.mark.parametrize("kind", sorted(SCALE_KERNELS))
    def test_marginal_variance(self, kind):
        rng = np.random.default_rng(0)
        times = np.linspace(0, 10, 25)
        draws = sample_log_scales(kind, times, rng, n_rows=2000)
        assert draws.shape == (2000, 25)
        np.testing.assert_allclose(draws.var(axis=0).mean(), 1.0, rtol=0.1)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sample_log_scales("medium", np.arange(3.0), np.random.default_rng(0))


class TestSemiorthogonal:
    def test_shape_and_invariant(self):
        U = random_semiorthogonal(7, 3, np.random.default_rng(1))
        assert U.shape == (7, 3)
        assert np.max(np.abs(U.T @ U - np.eye(3))) < 1e-10

    def test_wide_rejected(self):
        with pytest.raises(ValueError):
            random_semiorthogonal(2, 3, np.random.default_rng(0))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        R = np.linalg.qr(rng.standard_normal((5, 5)))[0]
        a = np.concatenate([random_semiorthogonal(5, 2, rng).ravel() for _ in range(1000)])
        b = np.concatenate([(R @ random_semiorthogonal(5, 2, rng)).ravel() for _ in range(1000)])
        assert a.size == 10_000
        assert stats.ks_2samp(a, b).pvalue > 0.01


class TestDgp:
    def test_default_noise_and_shape(self):
        cfg = DgpConfig()
        assert cfg.noise_std == 0.1
        b = generate_dgp(replace(cfg, n_times=50, n_channels=10))
        assert b.dataset.observations.shape == (10, 50)
        assert b.latents.shape == b.log_scales.shape == (3, 50)
        assert b.basis.shape == (10, 3)

    def test_round_trip(self):
        b = generate_dgp(DgpConfig(n_times=40, n_channels=6, seed=3))
        np.testing.assert_array_equal(b.signal() + b.noise, b.dataset.observations)

    def test_noise_free_is_signal(self):
        b = generate_dgp(DgpConfig(n_times=40, n_channels=6, noise_std=0.0, seed=3))
        np.testing.assert_array_equal(b.dataset.observations,
                                      latent_signal(b.basis, b.log_scales, b.latents))
        with_h0 = latent_signal(b.basis, np.zeros_like(b.log_scales), b.latents)
        np.testing.assert_allclose(with_h0, b.basis @ b.latents, rtol=1e-15)

    def test_seeded(self):
        cfg = DgpConfig(n_times=30, n_channels=5, seed=9)
        np.testing.assert_array_equal(generate_dgp(cfg).dataset.observations,
                                      generate_dgp(cfg).dataset.observations)

    def test_times_in_lorenz_units(self):
        cfg = DgpConfig(n_times=4)
        np.testing.assert_allclose(cfg.times, [0.0, 0.05, 0.1, 0.15])

    def test_trials_share_basis_and_scales(self):
        trials = generate_dgp_trials(DgpConfig(n_times=30, n_channels=5, n_trials=3, seed=2))
        assert len(trials) == 3
        for t in trials[1:]:
            np.testing.assert_array_equal(t.basis, trials[0].basis)
            np.testing.assert_array_equal(t.log_scales, trials[0].log_scales)
            assert not np.array_equal(t.latents, trials[0].latents)

    @pytest.mark.parametrize("kw", [dict(latent_dim=2), dict(n_channels=2), dict(scale_kernel="x"),
                                    dict(noise_std=-0.1), dict(n_times=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DgpConfig(**kw)

    @pytest.mark.slow
    def test_observation_covariance(self):
        # many trials sharing U and h: Cov(y_t) = U S^1/2 Cov(f_t) S^1/2 U^T + sigma^2 I
        cfg = DgpConfig(n_times=3, n_channels=4, noise_std=0.5, n_trials=1000, seed=5,
                        lorenz=LorenzConfig(stride=1, transient_discard=200))
        trials = generate_dgp_trials(cfg)
        t = 1
        Y = np.stack([b.dataset.observations[:, t] for b in trials])
        Fl = np.stack([b.latents[:, t] for b in trials])
        U, h = trials[0].basis, trials[0].log_scales[:, t]
        A = U * np.exp(h)
        expected = A @ np.cov(Fl.T) @ A.T + 0.25 * np.eye(4)
        emp = np.cov(Y.T)
        assert np.linalg.norm(emp - expected) / np.linalg.norm(expected) < 0.1


class TestMdgp:
    def test_levels(self):
        assert PERTURB_LEVELS == (0.01, 0.02, 0.05, 0.1)

    def test_zero_perturbation_copies_basis(self):
        base = DgpConfig(n_times=20, n_channels=6, seed=1)
        bundles = generate_mdgp(MdgpConfig(base=base, n_trials=4, perturb_sigma=0.0))
        for b in bundles[1:]:
            np.testing.assert_array_equal(b.basis, bundles[0].basis)
            assert not np.array_equal(b.log_scales, bundles[0].log_scales)

    def _base_and_perturbations(self, sigma, n_trials, seed=0, P=50):
        """Replay the generator's draws to recover U and each V_i."""
        base = DgpConfig(n_times=20, n_channels=P, seed=seed)
        bundles = generate_mdgp(MdgpConfig(base=base, n_trials=n_trials, perturb_sigma=sigma))
        rng = np.random.default_rng(seed)
        U = random_semiorthogonal(P, 3, rng)
        Vs = []
        for b in bundles:
            V = U + sigma * rng.standard_normal(U.shape)
            Vs.append(V)
            # consume the remaining per-trial draws in generator order
            sample_log_scales(base.scale_kernel, base.times, rng, 3)
            rng.standard_normal(3)
            rng.standard_normal((P, base.n_times))
        return U, Vs, bundles

    def test_replay_matches_generator(self):
        U, Vs, bundles = self._base_and_perturbations(0.05, 3)
        for V, b in zip(Vs, bundles):
            np.testing.assert_array_equal(polar_orthonormalize(V), b.basis)

    @pytest.mark.parametrize("sigma", PERTURB_LEVELS)
    def test_nearest_semiorthogonal(self, sigma):
        rng = np.random.default_rng(7)
        _, Vs, bundles = self._base_and_perturbations(sigma, 5)
        for V, b in zip(Vs, bundles):
            d = np.linalg.norm(V - b.basis)
            for _ in range(100):
                assert d <= np.linalg.norm(V - random_semiorthogonal(50, 3, rng))

    @pytest.mark.parametrize("sigma", PERTURB_LEVELS)
    def test_distance_scales_with_sigma(self, sigma):
        U, _, bundles = self._base_and_perturbations(sigma, 5)
        P, Q = U.shape
        tangent_dim = P * Q - Q * (Q + 1) / 2
        for b in bundles:
            assert np.linalg.norm(b.basis - U) <= 3 * sigma * math.sqrt(tangent_dim)

    def test_invalid(self):
        with pytest.raises(ValueError):
            MdgpConfig(perturb_sigma=-0.1)
        with pytest.raises(ValueError):
            MdgpConfig(n_trials=0)
