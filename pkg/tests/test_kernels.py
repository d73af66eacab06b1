import numpy as np
import pytest

from errors import InvalidArgumentError
from models import KernelHyperparams
from services.kernels import (
    cross_kernel,
    eval_kernel,
    gram_matrix,
    incomplete_cholesky,
    kernel_diagonal,
    kernel_dominance,
    kernel_gradients,
)


def _random_hp(rng):
    return KernelHyperparams(
        rbf_variance=rng.uniform(0.2, 2.0),
        rbf_lengthscale=rng.uniform(0.5, 3.0),
        linear_variance=rng.uniform(0.05, 1.0),
        bias_variance=rng.uniform(0.05, 1.0),
        noise_variance=rng.uniform(0.01, 0.5),
    )


class TestKernelValues:
    def test_gram_matches_pointwise_kernel(self, rng):
        hp = _random_hp(rng)
        X = rng.normal(size=(7, 3))
        K = gram_matrix(hp, X, with_noise=False).values
        for i in range(7):
            for j in range(7):
                assert K[i, j] == pytest.approx(eval_kernel(hp, X[i], X[j]), abs=1e-12)

    def test_noise_only_on_the_diagonal(self, rng):
        hp = _random_hp(rng)
        X = rng.normal(size=(5, 2))
        noisy = gram_matrix(hp, X).values
        clean = gram_matrix(hp, X, with_noise=False).values
        np.testing.assert_allclose(noisy - clean, hp.noise_variance * np.eye(5), atol=1e-12)
        np.testing.assert_allclose(cross_kernel(hp, X, X), clean, atol=1e-12)

    def test_gram_is_symmetric_positive_definite(self, rng):
        hp = _random_hp(rng)
        K = gram_matrix(hp, rng.normal(size=(20, 4))).values
        np.testing.assert_array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() > 0

    def test_diagonal_without_building_the_gram(self, rng):
        hp = _random_hp(rng)
        X = rng.normal(size=(9, 3))
        np.testing.assert_allclose(kernel_diagonal(hp, X), np.diag(gram_matrix(hp, X, with_noise=False).values))

    def test_switched_off_components_contribute_nothing(self, rng):
        X = rng.normal(size=(6, 2))
        K = gram_matrix(KernelHyperparams.linear(linear_variance=0.5), X, with_noise=False).values
        np.testing.assert_allclose(K, 0.5 * X @ X.T, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        hp = KernelHyperparams()
        with pytest.raises(InvalidArgumentError):
            eval_kernel(hp, np.zeros(3), np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            cross_kernel(hp, np.zeros((2, 3)), np.zeros((2, 2)))


class TestKernelGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_log_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        hp = _random_hp(rng)
        X = rng.normal(size=(6, 3))
        grads = kernel_gradients(hp, X)
        base = hp.log_vector()
        eps = 1e-6
        for i, name in enumerate(KernelHyperparams.NAMES):
            step = np.zeros_like(base)
            step[i] = eps
            plus = gram_matrix(hp.with_log_vector(base + step), X).values
            minus = gram_matrix(hp.with_log_vector(base - step), X).values
            np.testing.assert_allclose(grads[name], (plus - minus) / (2 * eps), rtol=1e-5, atol=1e-7,
                                       err_msg=name)


class TestIncompleteCholesky:
    def test_full_rank_reproduces_the_gram(self, rng):
        hp = _random_hp(rng)
        X = rng.normal(size=(15, 3))
        lr = incomplete_cholesky(hp, X, max_rank=15)
        K = gram_matrix(hp, X, with_noise=False).values
        np.testing.assert_allclose(lr.factor @ lr.factor.T, K, atol=1e-8)
        assert len(set(lr.pivots)) == len(lr.pivots)

    def test_residual_trace_shrinks_with_rank(self, rng):
        hp = KernelHyperparams.rbf(rbf_lengthscale=1.0)
        X = rng.normal(size=(40, 2))
        traces = [incomplete_cholesky(hp, X, max_rank=q).residual_trace for q in (1, 5, 10, 20)]
        assert all(a >= b for a, b in zip(traces, traces[1:]))

    def test_first_pivot_is_largest_diagonal(self, rng):
        hp = KernelHyperparams.linear()
        X = rng.normal(size=(12, 2))
        lr = incomplete_cholesky(hp, X, max_rank=1)
        assert lr.pivots == [int(np.argmax(kernel_diagonal(hp, X)))]

    def test_low_rank_kernel_stops_early(self, rng):
        # linear kernel on 2-D inputs has rank 2
        lr = incomplete_cholesky(KernelHyperparams.linear(), rng.normal(size=(30, 2)), max_rank=10, tol=1e-10)
        assert lr.rank == 2

    def test_rank_bounds(self, rng):
        with pytest.raises(InvalidArgumentError):
            incomplete_cholesky(KernelHyperparams(), rng.normal(size=(5, 2)), max_rank=0)
        with pytest.raises(InvalidArgumentError):
            incomplete_cholesky(KernelHyperparams(), rng.normal(size=(5, 2)), max_rank=6)


class TestKernelDominance:
    def test_single_component_dominates(self, rng):
        shares = kernel_dominance(KernelHyperparams.linear(), rng.normal(size=(10, 3)))
        assert shares["linear"] == pytest.approx(1.0)
        assert shares["dominant"] == pytest.approx(1.0)

    def test_shares_sum_to_one(self, rng):
        shares = kernel_dominance(KernelHyperparams(), rng.normal(size=(10, 3)))
        assert shares["rbf"] + shares["linear"] + shares["bias"] == pytest.approx(1.0)
