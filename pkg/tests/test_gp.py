import math

import numpy as np
import pytest

from ccgpfa.gp import (ConditioningError, GaussianDensity, KernelSpec, chol_solve, cholesky,
                       gauss_kl, kernel_matrix, lengthscale_objective, optimize_lengthscale)


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, 1.0 / cond, n)) @ Q.T


def random_gaussian(rng, n):
    return GaussianDensity(rng.standard_normal(n), random_spd(rng, n, 50.0))


class TestKernel:
    def test_single_point(self):
        spec = KernelSpec(3.0, jitter=1e-6)
        assert abs(kernel_matrix(spec, [0.0])[0, 0] - (1.0 + 1e-6)) < 1e-15

    def test_off_diagonal(self):
        K = kernel_matrix(KernelSpec(1.0), [0.0, 1.0])
        assert abs(K[0, 1] - math.exp(-0.5)) < 1e-15
        assert abs(K[0, 1] - 0.6065307) < 1e-7

    def test_flat_limit(self):
        K = kernel_matrix(KernelSpec(1e8), np.arange(5.0), np.arange(5.0) + 0.5)
        assert np.allclose(K, 1.0, atol=1e-12)

    def test_cross_covariance_has_no_jitter(self):
        spec = KernelSpec(2.0, jitter=1e-3)
        K = kernel_matrix(spec, [0.0, 1.0], [0.0, 2.0])
        assert K[0, 0] == 1.0

    @pytest.mark.parametrize("T, ell", [(50, 2.0), (200, 10.0), (500, 30.0), (500, 100.0)])
    def test_psd_with_small_jitter(self, T, ell):
        K = kernel_matrix(KernelSpec(ell, jitter=1e-6), np.arange(1.0, T + 1))
        assert np.allclose(K, K.T)
        np.linalg.cholesky(K)

    def test_validation(self):
        with pytest.raises(ValueError):
            kernel_matrix(KernelSpec(1.0), [0.0, np.nan])
        with pytest.raises(ValueError):
            KernelSpec(-1.0)
        with pytest.raises(ValueError):
            KernelSpec(1.0, family="matern")


class TestLinearAlgebra:
    def test_identity(self, rng):
        B = rng.standard_normal((4, 3))
        assert np.allclose(chol_solve(np.eye(4), B), B)

    def test_diagonal(self):
        assert np.allclose(chol_solve(np.diag([2.0, 4.0]), np.eye(2)), np.diag([0.5, 0.25]))

    def test_residual(self, rng):
        A = random_spd(rng, 20)
        B = rng.standard_normal((20, 5))
        X = chol_solve(A, B)
        assert np.max(np.abs(A @ X - B)) < 1e-8 * np.max(np.abs(B))

    def test_jitter_rescues_semidefinite(self):
        v = np.array([1.0, 2.0, 3.0])
        L = cholesky(np.outer(v, v))
        assert np.all(np.isfinite(L))

    def test_conditioning_error(self):
        with pytest.raises(ConditioningError):
            cholesky(np.diag([1.0, -1.0]))


class TestGaussKL:
    def test_self(self, rng):
        q = random_gaussian(rng, 5)
        assert gauss_kl(q, q) < 1e-10

    def test_scalar_variance(self):
        q = GaussianDensity([0.0], [[1.0]])
        p = GaussianDensity([0.0], [[math.e]])
        assert abs(gauss_kl(q, p) - 0.5 * math.exp(-1.0)) < 1e-12
        assert abs(gauss_kl(q, p) - 0.1839397) < 1e-7

    def test_mean_shift(self):
        assert abs(gauss_kl(GaussianDensity([1.0], [[1.0]]), GaussianDensity([0.0], [[1.0]])) - 0.5) < 1e-12

    def test_random_pairs_nonnegative(self, rng):
        for _ in range(100):
            n = rng.integers(1, 6)
            q, p = random_gaussian(rng, n), random_gaussian(rng, n)
            kl = gauss_kl(q, p)
            # closed-form oracle with explicit inverses
            P = np.linalg.inv(p.cov)
            d = p.mean - q.mean
            ref = 0.5 * (np.linalg.slogdet(p.cov)[1] - np.linalg.slogdet(q.cov)[1] - n
                         + np.trace(P @ q.cov) + d @ P @ d)
            assert kl >= 0 and abs(kl - ref) < 1e-8 * max(1.0, ref)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gauss_kl(GaussianDensity([0.0], [[1.0]]), GaussianDensity([0.0, 0.0], np.eye(2)))


def fd_check(ell, q, grid):
    _, grad = lengthscale_objective(ell, q, grid)
    h = 1e-4 * ell
    fd = (lengthscale_objective(ell + h, q, grid)[0] - lengthscale_objective(ell - h, q, grid)[0]) / (2 * h)
    return grad, fd


class TestLengthscale:
    def test_scalar_case_flat(self):
        q = GaussianDensity([0.3], [[0.5]])
        v1, g = lengthscale_objective(2.0, q, [1.0])
        v2, _ = lengthscale_objective(7.0, q, [1.0])
        assert g == 0.0 and v1 == v2

    def test_prior_matched(self):
        grid = np.arange(1.0, 21.0)
        K = kernel_matrix(KernelSpec(4.0), grid)
        q = GaussianDensity(np.zeros(20), K)
        value, grad = lengthscale_objective(4.0, q, grid)
        assert abs(value + 0.5 * (np.linalg.slogdet(K)[1] + 20)) < 1e-8
        _, fd = fd_check(4.0, q, grid)
        assert abs(grad - fd) < 1e-4 * max(1.0, abs(fd))

    def test_finite_differences_random(self, rng):
        grid = np.arange(1.0, 31.0)
        for _ in range(50):
            ell = rng.uniform(1.5, 12.0)
            K = kernel_matrix(KernelSpec(rng.uniform(1.5, 12.0)), grid)
            L = np.linalg.cholesky(K)
            q = GaussianDensity(L @ rng.standard_normal(30), 0.5 * K + 0.1 * np.eye(30))
            grad, fd = fd_check(ell, q, grid)
            assert abs(grad - fd) <= 1e-4 * abs(fd) + 1e-6

    @pytest.mark.parametrize("true_ell, start", [(3.0, 6.0), (8.0, 4.0), (5.0, 5.9)])
    def test_recovers_generating_lengthscale(self, true_ell, start):
        grid = np.arange(1.0, 41.0)
        q = GaussianDensity(np.zeros(40), kernel_matrix(KernelSpec(true_ell), grid))
        ell, _ = optimize_lengthscale(start, q, grid, max_iter=200)
        assert abs(ell - true_ell) < 0.15 * true_ell

    def test_optimizer_never_decreases(self, rng):
        grid = np.arange(1.0, 26.0)
        q = GaussianDensity(rng.standard_normal(25), 0.3 * np.eye(25))
        start_value, _ = lengthscale_objective(3.0, q, grid)
        _, value = optimize_lengthscale(3.0, q, grid)
        assert value >= start_value
