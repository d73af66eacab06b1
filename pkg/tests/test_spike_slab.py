import itertools

import numpy as np
import pytest
from scipy.integrate import dblquad, quad
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from services.params import NLSSParams, SSParams
from services.selection import build_state_sets, select_indices
from services.spike_slab import (
    SSStats,
    slab_updates,
    ss_collapsed_log_marginal,
    ss_estep,
    ss_log_joints,
    ss_mstep,
)


def _random_params(rng, d, h, cls=SSParams):
    return cls(W=rng.normal(size=(d, h)), sigma2=rng.uniform(0.3, 1.0), pi=rng.uniform(0.1, 0.5),
               mu=rng.normal(size=h), psi=rng.uniform(0.5, 1.5, size=h))


def _isotropic_pdf(y, mean, sigma2):
    resid = y - mean
    return np.exp(-0.5 * resid @ resid / sigma2) / (2 * np.pi * sigma2) ** (len(y) / 2)


def _dense_log_joint(params, y, s):
    s = np.asarray(s, dtype=float)
    Ws = params.W * s
    cov = params.sigma2 * np.eye(len(y)) + Ws @ np.diag(params.psi) @ Ws.T
    active = s.sum()
    prior = active * np.log(params.pi) + (len(s) - active) * np.log1p(-params.pi)
    return prior + multivariate_normal(mean=Ws @ params.mu, cov=cov).logpdf(y)


class TestCollapsedMarginal:
    def test_one_latent_matches_quadrature(self, rng):
        params = _random_params(rng, 2, 1)
        y = rng.normal(size=2)
        value, moments = ss_collapsed_log_marginal(params, y, np.array([1]))

        def joint(z):
            return norm.pdf(z, params.mu[0], np.sqrt(params.psi[0])) * _isotropic_pdf(y, params.W[:, 0] * z, params.sigma2)

        evidence = quad(joint, -30, 30, points=[params.mu[0]], limit=200)[0]
        first = quad(lambda z: z * joint(z), -30, 30, points=[params.mu[0]], limit=200)[0]
        assert value == pytest.approx(np.log(params.pi) + np.log(evidence), rel=1e-7)
        assert moments.mean[0] == pytest.approx(first / evidence, rel=1e-6, abs=1e-8)

    def test_two_active_latents_match_double_quadrature(self, rng):
        params = _random_params(rng, 2, 2)
        y = rng.normal(size=2)
        value, _ = ss_collapsed_log_marginal(params, y, np.array([1, 1]))

        def joint(z2, z1):
            z = np.array([z1, z2])
            return np.prod(norm.pdf(z, params.mu, np.sqrt(params.psi))) * _isotropic_pdf(y, params.W @ z, params.sigma2)

        evidence = dblquad(joint, -12, 12, -12, 12, epsabs=1e-12, epsrel=1e-9)[0]
        assert value == pytest.approx(2 * np.log(params.pi) + np.log(evidence), rel=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_gaussian(self, seed):
        rng = np.random.default_rng(seed)
        params = _random_params(rng, 5, 3)
        Y = rng.normal(size=(3, 5))
        states = np.array(list(itertools.product([0, 1], repeat=3)), dtype=np.uint8)
        batch = ss_log_joints(params, Y, np.broadcast_to(states, (3, 8, 3)))
        for n in range(3):
            for k, s in enumerate(states):
                assert batch[n, k] == pytest.approx(_dense_log_joint(params, Y[n], s), rel=1e-10)

    def test_zero_state_ignores_slabs(self, rng):
        params = _random_params(rng, 3, 2)
        y = rng.normal(size=3)
        value, moments = ss_collapsed_log_marginal(params, y, np.array([0, 0]))
        expected = 2 * np.log1p(-params.pi) + multivariate_normal(np.zeros(3), params.sigma2 * np.eye(3)).logpdf(y)
        assert value == pytest.approx(expected, rel=1e-12)
        np.testing.assert_array_equal(moments.mean, 0.0)


class TestTruncatedPosterior:
    @pytest.mark.parametrize("seed", range(15))
    def test_equals_exact_posterior_renormalized_over_the_subset(self, seed):
        rng = np.random.default_rng(seed)
        h = int(rng.integers(2, 5))
        params = _random_params(rng, 4, h)
        Y = rng.normal(size=(3, 4))
        states = build_state_sets(select_indices(rng.random((3, h)), int(rng.integers(1, h + 1)), 0.0), h).states
        posterior, exp_s, exp_sz, _ = ss_estep(params, Y, states)

        every = np.array(list(itertools.product([0, 1], repeat=h)), dtype=np.uint8)
        keys = [tuple(s) for s in every]
        for n in range(3):
            exact = np.array([_dense_log_joint(params, Y[n], s) for s in every])
            exact = np.exp(exact - logsumexp(exact))
            subset = np.array([exact[keys.index(tuple(s))] for s in states[n]])
            np.testing.assert_allclose(posterior.probs[n], subset / subset.sum(), atol=1e-10)
        assert np.all(exp_sz[exp_s == 0] == 0)


class TestMStep:
    def test_latents_without_support_keep_their_slab(self):
        previous = SSParams(W=np.ones((2, 2)), sigma2=1.0, pi=0.3, mu=np.array([5.0, 7.0]), psi=np.array([2.0, 3.0]))
        mu, psi = slab_updates(np.array([4.0, 0.0]), np.array([8.0, 0.0]), np.array([20.0, 0.0]), previous)
        np.testing.assert_allclose(mu, [2.0, 7.0])
        np.testing.assert_allclose(psi, [1.0, 3.0])

    def test_keeps_the_parameter_type(self, rng):
        params = _random_params(rng, 4, 2, cls=NLSSParams)
        h = 2
        stats = SSStats(n_points=20, n_dims=4, sum_s=np.full(h, 5.0), sum_ysz=rng.normal(size=(4, h)),
                        sum_szsz=np.diag([6.0, 7.0]), sum_sz=np.array([4.0, 5.0]), sum_sz2=np.array([6.0, 7.0]),
                        sum_yy=200.0)
        assert type(ss_mstep(stats, params)) is NLSSParams

    def test_point_mass_slabs_give_least_squares(self, rng):
        S = (rng.random((80, 2)) < 0.6).astype(float)
        Z = 1.0 + 0.3 * rng.normal(size=(80, 2))
        SZ = S * Z
        Y = SZ @ rng.normal(size=(2, 3)) + 0.05 * rng.normal(size=(80, 3))
        stats = SSStats(n_points=80, n_dims=3, sum_s=S.sum(axis=0), sum_ysz=Y.T @ SZ, sum_szsz=SZ.T @ SZ,
                        sum_sz=SZ.sum(axis=0), sum_sz2=(SZ ** 2).sum(axis=0), sum_yy=float(np.sum(Y * Y)))
        params = ss_mstep(stats)
        np.testing.assert_allclose(params.W, np.linalg.lstsq(SZ, Y, rcond=None)[0].T, atol=1e-10)
        np.testing.assert_allclose(params.mu, SZ.sum(axis=0) / S.sum(axis=0))
