import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oslmm.model import (
    Dataset,
    NoiseModel,
    RankDeficientError,
    as_trials,
    latent_signal,
    log_likelihood,
    orthonormalized_latents,
    polar_orthonormalize,
    project_observations,
    sign_normalize_columns,
    slmm_mean,
)


def _stiefel(rng, P, Q):
    return np.linalg.qr(rng.standard_normal((P, Q)))[0]


def _gaussian_posterior(B, noise_cov, y, prior_cov):
    """Dense conditioning of f ~ N(0, prior_cov) on y = B f + e."""
    S = B @ prior_cov @ B.T + noise_cov
    gain = prior_cov @ B.T @ np.linalg.inv(S)
    return gain @ y, prior_cov - gain @ B @ prior_cov


class TestDataset:
    def test_shapes(self):
        d = Dataset([0.0, 1.0, 2.0], np.zeros((4, 3)))
        assert (d.n_channels, d.n_times) == (4, 3)

    def test_vector_promoted_to_single_channel(self):
        assert Dataset([0.0, 1.0], [1.0, 2.0]).observations.shape == (1, 2)

    @pytest.mark.parametrize("times,obs", [
        ([0.0, 0.0], np.zeros((1, 2))),
        ([1.0, 0.0], np.zeros((1, 2))),
        ([0.0, 1.0], np.zeros((1, 3))),
        ([0.0, 1.0], np.array([[0.0, np.nan]])),
        ([], np.zeros((1, 0))),
    ])
    def test_invalid(self, times, obs):
        with pytest.raises(ValueError):
            Dataset(times, obs)

    def test_as_trials_checks_grid(self):
        a = Dataset([0.0, 1.0], np.zeros((2, 2)))
        b = Dataset([0.0, 2.0], np.zeros((2, 2)))
        assert len(as_trials(a)) == 1
        with pytest.raises(ValueError):
            as_trials([a, b])


class TestNoiseModel:
    def test_homogeneous(self):
        np.testing.assert_array_equal(NoiseModel(0.3).variances(3), [0.3, 0.3, 0.3])

    def test_per_channel(self):
        n = NoiseModel(1.0, [0.1, 0.2])
        np.testing.assert_array_equal(n.variances(2), [0.1, 0.2])
        with pytest.raises(ValueError):
            n.variances(3)

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.inf])
    def test_rejects_non_positive(self, bad):
        with pytest.raises(ValueError):
            NoiseModel(bad)


class TestPolar:
    def test_orthonormal_input_is_fixed_point(self):
        U = _stiefel(np.random.default_rng(0), 6, 3)
        np.testing.assert_allclose(polar_orthonormalize(U), U, atol=1e-12)

    def test_matches_inverse_square_root_oracle(self):
        V = np.random.default_rng(1).standard_normal((5, 2))
        w, E = np.linalg.eigh(V.T @ V)
        oracle = V @ (E @ np.diag(w ** -0.5) @ E.T)
        np.testing.assert_allclose(polar_orthonormalize(V), oracle, atol=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 6), st.integers(0, 2**31 - 1))
    def test_stiefel_invariant(self, Q, extra, seed):
        V = np.random.default_rng(seed).standard_normal((Q + extra, Q))
        U = polar_orthonormalize(V)
        assert np.max(np.abs(U.T @ U - np.eye(Q))) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariant_to_right_spd_factor(self, seed):
        rng = np.random.default_rng(seed)
        U = _stiefel(rng, 7, 3)
        B = rng.standard_normal((3, 3))
        A = B @ B.T + 0.5 * np.eye(3)
        np.testing.assert_allclose(polar_orthonormalize(U @ A), U, atol=1e-8)

    def test_nearest_semiorthogonal(self):
        rng = np.random.default_rng(2)
        V = rng.standard_normal((6, 2))
        U = polar_orthonormalize(V)
        best = np.linalg.norm(V - U)
        for _ in range(200):
            assert best <= np.linalg.norm(V - _stiefel(rng, 6, 2)) + 1e-12

    def test_rank_deficient(self):
        V = np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]])
        with pytest.raises(RankDeficientError):
            polar_orthonormalize(V)

    def test_wide_rejected(self):
        with pytest.raises(ValueError):
            polar_orthonormalize(np.ones((2, 3)))

    def test_sign_normalize(self):
        A = np.array([[0.1, 3.0], [-2.0, 1.0]])
        out = sign_normalize_columns(A)
        np.testing.assert_array_equal(out, [[-0.1, 3.0], [2.0, 1.0]])


class TestProjection:
    def test_identity_projection(self):
        Y = np.arange(6.0).reshape(2, 3)
        pd = project_observations(Dataset([0, 1, 2], Y), np.eye(2), np.zeros((2, 3)), NoiseModel(0.7))
        np.testing.assert_array_equal(pd.projected, Y)
        np.testing.assert_array_equal(pd.noise_diag, np.full((2, 3), 0.7))

    def test_log_two_shift_scaling(self):
        rng = np.random.default_rng(3)
        U = _stiefel(rng, 4, 2)
        Y = rng.standard_normal((4, 5))
        H = rng.standard_normal((2, 5))
        H2 = H.copy()
        H2[1, 3] += math.log(2.0)
        a = project_observations(Y, U, H, NoiseModel(0.5))
        b = project_observations(Y, U, H2, NoiseModel(0.5))
        assert b.projected[1, 3] == pytest.approx(a.projected[1, 3] / 2, rel=1e-14)
        assert b.noise_diag[1, 3] == pytest.approx(a.noise_diag[1, 3] / 4, rel=1e-14)

    def test_direct_matrix_oracle(self):
        rng = np.random.default_rng(4)
        U = _stiefel(rng, 3, 2)
        h = rng.standard_normal(2)
        y = rng.standard_normal(3)
        expected = np.diag(np.exp(-h)) @ U.T @ y
        pd = project_observations(y[:, None], U, h[:, None], NoiseModel(0.2))
        np.testing.assert_allclose(pd.projected[:, 0], expected, rtol=1e-13)
        np.testing.assert_allclose(pd.noise_diag[:, 0], 0.2 * np.exp(-2 * h), rtol=1e-13)

    def test_reconstruction_is_orthogonal_projection(self):
        rng = np.random.default_rng(5)
        U = _stiefel(rng, 6, 2)
        Y = rng.standard_normal((6, 8))
        H = rng.standard_normal((2, 8))
        pd = project_observations(Y, U, H, NoiseModel(1.0))
        np.testing.assert_allclose(U @ (np.exp(H) * pd.projected), U @ U.T @ Y, atol=1e-8)

    def test_per_channel_noise_rejected(self):
        with pytest.raises(ValueError):
            project_observations(np.zeros((2, 1)), np.eye(2), np.zeros((2, 1)), NoiseModel(1.0, [1.0, 2.0]))


class TestSufficiency:
    def test_posteriors_agree_on_grid(self):
        rng = np.random.default_rng(6)
        P, Q = 3, 2
        U = _stiefel(rng, P, Q)
        h = np.array([0.4, -0.7])
        sigma2 = 0.3
        prior = np.eye(Q)
        f_true = rng.standard_normal(Q)
        y = U @ (np.exp(h) * f_true) + math.sqrt(sigma2) * rng.standard_normal(P)

        B_full = U @ np.diag(np.exp(h))
        m1, C1 = _gaussian_posterior(B_full, sigma2 * np.eye(P), y, prior)

        pd = project_observations(y[:, None], U, h[:, None], NoiseModel(sigma2))
        m2, C2 = _gaussian_posterior(np.eye(Q), np.diag(pd.noise_diag[:, 0]), pd.projected[:, 0], prior)

        grid = m1 + rng.standard_normal((100, Q)) * 2.0
        d1 = stats.multivariate_normal(m1, C1).logpdf(grid)
        d2 = stats.multivariate_normal(m2, C2).logpdf(grid)
        np.testing.assert_allclose(np.exp(d1), np.exp(d2), atol=1e-8, rtol=0)
        np.testing.assert_allclose(d1, d2, atol=1e-8)


class TestSignals:
    def test_latent_signal_identity_case(self):
        F = np.random.default_rng(7).standard_normal((3, 4))
        np.testing.assert_array_equal(latent_signal(np.eye(3), np.zeros((3, 4)), F), F)

    def test_latent_signal_oracle_and_homogeneity(self):
        rng = np.random.default_rng(8)
        U = _stiefel(rng, 5, 2)
        H = rng.standard_normal((2, 3))
        F = rng.standard_normal((2, 3))
        oracle = np.column_stack([U @ np.diag(np.exp(H[:, t])) @ F[:, t] for t in range(3)])
        np.testing.assert_allclose(latent_signal(U, H, F), oracle, rtol=1e-13)
        np.testing.assert_allclose(latent_signal(U, H, 2.5 * F), 2.5 * oracle, rtol=1e-13)

    def test_orthonormalized_latents(self):
        rng = np.random.default_rng(9)
        H = rng.standard_normal((2, 4))
        F = rng.standard_normal((2, 4))
        np.testing.assert_array_equal(orthonormalized_latents(np.zeros((2, 4)), F), F)
        C = orthonormalized_latents(H, F)
        for q in range(2):
            for t in range(4):
                assert C[q, t] == pytest.approx(math.exp(H[q, t]) * F[q, t], rel=1e-14)
        U = _stiefel(rng, 3, 2)
        np.testing.assert_allclose(latent_signal(U, H, F), U @ C, rtol=1e-14)

    def test_slmm_mean(self):
        rng = np.random.default_rng(10)
        F = rng.standard_normal((2, 3))
        I = np.repeat(np.eye(2)[:, :, None], 3, axis=2)
        np.testing.assert_allclose(slmm_mean(I, F), F)
        W = rng.standard_normal((3, 2, 2))
        F2 = rng.standard_normal((2, 2))
        oracle = np.column_stack([W[:, :, t] @ F2[:, t] for t in range(2)])
        np.testing.assert_allclose(slmm_mean(W, F2), oracle, rtol=1e-13)
        w1 = rng.standard_normal((4, 1, 3))
        f1 = rng.standard_normal((1, 3))
        np.testing.assert_allclose(slmm_mean(w1, f1), w1[:, 0, :] * f1[0], rtol=1e-14)

    def test_slmm_mean_shape_check(self):
        with pytest.raises(ValueError):
            slmm_mean(np.zeros((2, 2)), np.zeros((2, 2)))


class TestLogLikelihood:
    def test_zero_residual(self):
        Y = np.ones((3, 4))
        expected = -(12 / 2) * math.log(2 * math.pi * 0.5)
        assert log_likelihood(Dataset(np.arange(4), Y), Y, NoiseModel(0.5)) == pytest.approx(expected)

    def test_univariate_oracle(self):
        rng = np.random.default_rng(11)
        Y = rng.standard_normal((2, 2))
        G = rng.standard_normal((2, 2))
        var = np.array([0.4, 1.7])
        oracle = sum(stats.norm(G[p, t], math.sqrt(var[p])).logpdf(Y[p, t]) for p in range(2) for t in range(2))
        assert log_likelihood(Y, G, NoiseModel(1.0, var)) == pytest.approx(oracle, rel=1e-12)

    def test_decreases_with_residual(self):
        Y = np.zeros((2, 3))
        vals = []
        for r in (0.0, 0.5, 1.0, 2.0):
            G = np.zeros((2, 3))
            G[1, 2] = -r
            vals.append(log_likelihood(Y, G, NoiseModel(1.0)))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        Y = rng.standard_normal((4, 5))
        G = rng.standard_normal((4, 5))
        perm = rng.permutation(4)
        assert log_likelihood(Y[perm], G[perm], NoiseModel(0.9)) == pytest.approx(
            log_likelihood(Y, G, NoiseModel(0.9)), rel=1e-14)
