import math

import numpy as np
import pytest

import copulalm.autodiff as ad
from copulalm.copula import (CopulaSample, gaussian_log_marginals_sum,
                             joint_log_posterior, log_copula_density,
                             log_copula_density_graph, log_marginals_sum_graph,
                             probability_integral_transform,
                             reparam_copula_sample)
from copulalm.errors import DomainError, ShapeError
from copulalm.lowrank import CholeskyFactor, DiagRankOneCov, cholesky, dense
from copulalm.oracles import (QuadratureSpec, copula_normalization_2d,
                              dense_reference)
from copulalm.special_functions import std_normal_pdf


def _random_cov(rng, d):
    return DiagRankOneCov(w=rng.uniform(0.5, 2.0, d), a=rng.uniform(-1.0, 1.0, d))


def _dense_log_copula(cov, q):
    """Reference evaluation: joint normal log-density minus marginal log-densities."""
    ref = dense_reference(cov)
    d = cov.dim
    log_joint = -0.5 * (d * math.log(2.0 * math.pi) + ref.logdet + float(q @ ref.inverse @ q))
    variances = np.diag(dense(cov))
    log_marg = sum(math.log(std_normal_pdf(qi / math.sqrt(v)) / math.sqrt(v))
                   for qi, v in zip(q, variances))
    return log_joint - log_marg


class TestLogCopulaDensity:
    def test_identity_covariance_is_zero(self):
        cov = DiagRankOneCov(w=np.ones(3), a=np.zeros(3))
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert log_copula_density(cov, rng.standard_normal(3)) == pytest.approx(0.0, abs=1e-14)

    def test_diagonal_covariance_is_zero(self):
        rng = np.random.default_rng(1)
        for d in (1, 2, 5, 17, 32):
            cov = DiagRankOneCov(w=rng.uniform(0.5, 2.0, d), a=np.zeros(d))
            for _ in range(5):
                q = rng.standard_normal(d) * 3.0
                assert abs(float(log_copula_density(cov, q))) <= 1e-12

    def test_worked_value_at_origin(self):
        cov = DiagRankOneCov(w=np.array([1.0, 1.0]), a=np.array([0.6, 0.8]))
        expected = 0.5 * math.log(1.36 * 1.64 / 2.0)
        value = float(log_copula_density(cov, np.zeros(2)))
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(_dense_log_copula(cov, np.zeros(2)), abs=1e-12)

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            cov = _random_cov(rng, int(rng.integers(1, 33)))
            q = rng.standard_normal(cov.dim) * 2.0
            fast = float(log_copula_density(cov, q))
            assert abs(fast - _dense_log_copula(cov, q)) <= 1e-9

    def test_sklar_consistency(self):
        # copula term plus factorized marginals equals the joint normal density
        rng = np.random.default_rng(3)
        for _ in range(30):
            cov = _random_cov(rng, int(rng.integers(1, 17)))
            ref = dense_reference(cov)
            mu = rng.standard_normal(cov.dim)
            q = rng.standard_normal(cov.dim)
            sigma = np.sqrt(np.diag(dense(cov)))
            total = float(log_copula_density(cov, q)) \
                + gaussian_log_marginals_sum(mu, sigma, mu + q)
            log_joint = -0.5 * (cov.dim * math.log(2.0 * math.pi) + ref.logdet
                                + float(q @ ref.inverse @ q))
            assert abs(total - log_joint) <= 1e-9

    def test_batched_agrees_with_pointwise(self):
        rng = np.random.default_rng(4)
        cov = _random_cov(rng, 3)
        qs = rng.standard_normal((10, 3))
        batched = log_copula_density(cov, qs)
        for row, q in zip(batched, qs):
            assert row == pytest.approx(float(log_copula_density(cov, q)), abs=1e-12)

    def test_shape_error(self):
        cov = DiagRankOneCov(w=np.ones(3), a=np.zeros(3))
        with pytest.raises(ShapeError):
            log_copula_density(cov, np.ones(2))

    def test_normalizes_on_unit_square(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            cov = _random_cov(rng, 2)
            integral, bound = copula_normalization_2d(log_copula_density, cov)
            assert abs(integral - 1.0) <= 1e-3
            assert bound <= 1e-3


class TestReparamCopulaSample:
    def test_identity_factor(self):
        eps = np.array([0.3, -1.2])
        out = reparam_copula_sample(CholeskyFactor(np.eye(2)), eps)
        assert isinstance(out, CopulaSample)
        np.testing.assert_allclose(out.q, eps)

    def test_zero_noise(self):
        factor = cholesky(DiagRankOneCov(w=np.array([2.0, 3.0]), a=np.array([1.0, 1.0])))
        out = reparam_copula_sample(factor, np.zeros(2))
        np.testing.assert_allclose(out.q, np.zeros(2))
        np.testing.assert_allclose(out.u, np.full(2, 0.5))

    def test_companion_in_open_interval(self):
        rng = np.random.default_rng(6)
        factor = cholesky(_random_cov(rng, 4))
        for _ in range(50):
            out = reparam_copula_sample(factor, rng.standard_normal(4))
            assert np.all(out.u > 0.0) and np.all(out.u < 1.0)

    def test_empirical_covariance(self):
        cov = DiagRankOneCov(w=np.array([0.8, 1.1, 0.9]), a=np.array([0.9, -0.8, 0.85]))
        factor = cholesky(cov)
        rng = np.random.default_rng(7)
        draws = np.stack([reparam_copula_sample(factor, rng.standard_normal(3)).q
                          for _ in range(100_000)])
        target = dense(cov)
        empirical = np.cov(draws, rowvar=False)
        assert np.max(np.abs(empirical - target) / np.abs(target)) < 0.05

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            reparam_copula_sample(CholeskyFactor(np.eye(2)), np.zeros(3))


class TestGaussianLogMarginals:
    def test_standard_normal_at_zero(self):
        value = gaussian_log_marginals_sum(np.zeros(1), np.ones(1), np.zeros(1))
        assert value == pytest.approx(-0.5 * math.log(2.0 * math.pi), abs=1e-14)
        assert value == pytest.approx(-0.91894, abs=1e-5)

    def test_at_the_mean(self):
        sigma = np.array([0.5, 2.0])
        value = gaussian_log_marginals_sum(np.array([1.0, -1.0]), sigma, np.array([1.0, -1.0]))
        assert value == pytest.approx(-float(np.sum(np.log(sigma))) - math.log(2.0 * math.pi),
                                      abs=1e-12)

    def test_matches_pdf_product(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            d = int(rng.integers(1, 8))
            mu = rng.standard_normal(d)
            sigma = rng.uniform(0.3, 2.0, d)
            z = rng.standard_normal(d)
            expected = sum(math.log(std_normal_pdf((zi - mi) / si) / si)
                           for zi, mi, si in zip(z, mu, sigma))
            assert gaussian_log_marginals_sum(mu, sigma, z) == pytest.approx(expected, abs=1e-12)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(DomainError):
            gaussian_log_marginals_sum(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2))


class TestJointLogPosterior:
    def test_reduces_to_marginals_when_diagonal(self):
        rng = np.random.default_rng(9)
        cov = DiagRankOneCov(w=rng.uniform(0.5, 2.0, 4), a=np.zeros(4))
        mu, z, q = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
        sigma = rng.uniform(0.5, 1.5, 4)
        assert joint_log_posterior(mu, sigma, cov, z, q) == pytest.approx(
            gaussian_log_marginals_sum(mu, sigma, z), abs=1e-12)

    def test_is_sum_of_parts(self):
        rng = np.random.default_rng(10)
        cov = _random_cov(rng, 5)
        mu, z, q = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5)
        sigma = rng.uniform(0.5, 1.5, 5)
        assert joint_log_posterior(mu, sigma, cov, z, q) == pytest.approx(
            float(log_copula_density(cov, q)) + gaussian_log_marginals_sum(mu, sigma, z),
            abs=1e-12)


class TestProbabilityIntegralTransform:
    def test_at_the_mean(self):
        u = probability_integral_transform(np.zeros(3), np.zeros(3), np.ones(3))
        np.testing.assert_allclose(u, 0.5)

    def test_one_sigma_above(self):
        mu = np.array([1.0, -2.0])
        sigma = np.array([0.5, 3.0])
        u = probability_integral_transform(mu + sigma, mu, sigma)
        np.testing.assert_allclose(u, 0.8413447460685429, atol=1e-12)

    def test_monotone_coordinatewise(self):
        mu, sigma = np.zeros(1), np.ones(1)
        zs = np.linspace(-4.0, 4.0, 33)
        us = [probability_integral_transform(np.array([z]), mu, sigma)[0] for z in zs]
        assert all(b > a for a, b in zip(us, us[1:]))

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(DomainError):
            probability_integral_transform(np.zeros(1), np.zeros(1), np.zeros(1))


class TestGraphBuilders:
    def test_graph_matches_numpy_density(self):
        rng = np.random.default_rng(11)
        w_val = rng.uniform(0.5, 2.0, (6, 4))
        a_val = rng.uniform(-1.0, 1.0, (6, 4))
        q_val = rng.standard_normal((6, 4))
        out = log_copula_density_graph(ad.param(w_val), ad.param(a_val), ad.param(q_val))
        for i in range(6):
            cov = DiagRankOneCov(w=w_val[i], a=a_val[i])
            assert out.v[i] == pytest.approx(float(log_copula_density(cov, q_val[i])), abs=1e-12)

    def test_graph_matches_numpy_marginals(self):
        rng = np.random.default_rng(12)
        mu_val = rng.standard_normal((5, 3))
        logvar_val = rng.uniform(-1.0, 1.0, (5, 3))
        z_val = rng.standard_normal((5, 3))
        out = log_marginals_sum_graph(ad.param(mu_val), ad.param(logvar_val), ad.param(z_val))
        for i in range(5):
            expected = gaussian_log_marginals_sum(mu_val[i], np.exp(0.5 * logvar_val[i]), z_val[i])
            assert out.v[i] == pytest.approx(expected, abs=1e-12)

    def test_graph_density_gradients(self):
        rng = np.random.default_rng(13)
        w = ad.param(rng.uniform(0.5, 2.0, (3, 4)), "w")
        a = ad.param(rng.uniform(-1.0, 1.0, (3, 4)), "a")
        q = ad.param(rng.standard_normal((3, 4)), "q")

        def build():
            out = log_copula_density_graph(w, a, q)
            return ad.vsum(ad.mul(out, ad.const(np.array([1.0, -0.5, 2.0]))))

        report = ad.finite_diff_check(build, {"w": w, "a": a, "q": q}, step=1e-5, tol=1e-5)
        assert report.passed, report.worst

    def test_end_to_end_copula_term_gradients(self):
        # the full training-path composition: factor, sample, density
        rng = np.random.default_rng(14)
        w = ad.param(rng.uniform(0.5, 2.0, (2, 4)), "w")
        a = ad.param(rng.uniform(-1.0, 1.0, (2, 4)), "a")
        eps = ad.const(rng.standard_normal((2, 4)))

        def build():
            q = ad.matvec(ad.rank_one_chol(w, a), eps)
            return ad.vsum(log_copula_density_graph(w, a, q))

        report = ad.finite_diff_check(build, {"w": w, "a": a}, step=1e-5, tol=1e-5)
        assert report.passed, report.worst
