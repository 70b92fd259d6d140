import math

import numpy as np
import pytest

from copulalm.copula import log_copula_density
from copulalm.errors import OracleError
from copulalm.lowrank import DiagRankOneCov
from copulalm.objective import kl_diag_gaussian_std_normal
from copulalm.oracles import (QuadratureSpec, _simpson_weights,
                              copula_normalization_2d, dense_reference,
                              mc_covariance, mc_kl_estimate)


class TestDenseReference:
    def test_identity(self):
        ref = dense_reference(DiagRankOneCov(w=np.ones(3), a=np.zeros(3)))
        assert ref.logdet == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(ref.inverse, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(ref.cholesky, np.eye(3), atol=1e-14)

    def test_hand_worked_two_by_two(self):
        cov = DiagRankOneCov(w=np.array([2.0, 3.0]), a=np.array([1.0, 1.0]))
        ref = dense_reference(cov)
        assert ref.logdet == pytest.approx(math.log(11.0), abs=1e-12)
        np.testing.assert_allclose(ref.inverse,
                                   np.array([[4.0, -1.0], [-1.0, 3.0]]) / 11.0, atol=1e-12)

    def test_factor_reconstructs(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            d = int(rng.integers(2, 20))
            cov = DiagRankOneCov(w=rng.uniform(0.5, 2.0, d), a=rng.uniform(-1.0, 1.0, d))
            ref = dense_reference(cov)
            target = np.diag(cov.w) + np.outer(cov.a, cov.a)
            np.testing.assert_allclose(ref.cholesky @ ref.cholesky.T, target, atol=1e-10)
            np.testing.assert_allclose(ref.inverse @ target, np.eye(d), atol=1e-9)

    def test_dimension_limit(self):
        with pytest.raises(OracleError):
            dense_reference(DiagRankOneCov(w=np.ones(300), a=np.zeros(300)))


class TestQuadrature:
    def test_identity_integrates_to_one(self):
        cov = DiagRankOneCov(w=np.ones(2), a=np.zeros(2))
        integral, bound = copula_normalization_2d(log_copula_density, cov)
        assert abs(integral - 1.0) <= 1e-6 + bound

    def test_worked_covariance(self):
        cov = DiagRankOneCov(w=np.array([1.0, 1.0]), a=np.array([0.6, 0.8]))
        integral, _ = copula_normalization_2d(log_copula_density, cov)
        assert abs(integral - 1.0) <= 1e-3

    def test_strong_correlation_with_refined_grid(self):
        # off-diagonal correlation about 0.91
        cov = DiagRankOneCov(w=np.array([0.05, 0.05]), a=np.array([0.7, 0.7]))
        spec = QuadratureSpec(initial_resolution=64, tolerance=5e-3, max_resolution=4096)
        integral, _ = copula_normalization_2d(log_copula_density, cov, spec)
        corr = 0.49 / math.sqrt(0.54 * 0.54)
        assert corr > 0.9
        assert abs(integral - 1.0) <= 1e-2

    def test_refinement_error_shrinks_when_resolution_doubles(self):
        # smooth 2-D integrand: successive Simpson refinements must at least
        # halve the change between estimates
        def f(x, y):
            return np.exp(-0.5 * (x * x + y * y)) * (1.0 + 0.3 * np.sin(x + y))

        def integral_at(n):
            xs = np.linspace(-1.0, 1.0, n + 1)
            grid = f(xs[:, None], xs[None, :])
            w = _simpson_weights(n)
            h = 2.0 / n
            return float(h * h * np.einsum("i,j,ij->", w, w, grid))

        estimates = [integral_at(n) for n in (16, 32, 64, 128)]
        diffs = [abs(b - a) for a, b in zip(estimates, estimates[1:])]
        assert all(later <= 0.5 * earlier for earlier, later in zip(diffs, diffs[1:]))

    def test_nonconvergence_reports(self):
        cov = DiagRankOneCov(w=np.ones(2), a=np.array([0.5, -0.5]))
        spec = QuadratureSpec(initial_resolution=16, tolerance=1e-300, max_resolution=32)
        with pytest.raises(OracleError):
            copula_normalization_2d(log_copula_density, cov, spec)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            QuadratureSpec(initial_resolution=8)
        with pytest.raises(ValueError):
            QuadratureSpec(tolerance=0.0)


class TestMonteCarloOracles:
    def test_kl_zero_case(self):
        estimate, se = mc_kl_estimate(np.zeros(3), np.zeros(3), n=50_000, seed=1)
        assert abs(estimate) <= 3.0 * max(se, 1e-12)

    def test_kl_analytic_case(self):
        estimate, se = mc_kl_estimate(np.array([1.0]), np.array([0.0]), n=200_000, seed=2)
        assert abs(estimate - 0.5) <= 3.0 * se

    def test_kl_brackets_closed_form(self):
        rng = np.random.default_rng(3)
        mu = rng.uniform(-1.0, 1.0, 4)
        logvar = rng.uniform(-0.5, 0.5, 4)
        estimate, se = mc_kl_estimate(mu, logvar, n=200_000, seed=4)
        assert abs(estimate - kl_diag_gaussian_std_normal(mu, logvar)) <= 3.0 * se

    def test_kl_sample_floor(self):
        with pytest.raises(ValueError):
            mc_kl_estimate(np.zeros(1), np.zeros(1), n=100, seed=0)

    def test_covariance_identity(self):
        empirical = mc_covariance(np.eye(3), n=100_000, seed=5)
        assert np.max(np.abs(empirical - np.eye(3))) < 0.05

    def test_covariance_scalar(self):
        empirical = mc_covariance(np.array([[1.7]]), n=50_000, seed=6)
        assert empirical.reshape(()) == pytest.approx(1.7 ** 2, rel=0.05)

    def test_covariance_matches_dense(self):
        from copulalm.lowrank import cholesky, dense
        cov = DiagRankOneCov(w=np.array([0.8, 1.1, 0.9]), a=np.array([0.9, -0.8, 0.85]))
        empirical = mc_covariance(cholesky(cov).matrix, n=100_000, seed=7)
        target = dense(cov)
        n = 100_000
        se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target ** 2) / n)
        assert np.all(np.abs(empirical - target) <= 3.0 * se)
