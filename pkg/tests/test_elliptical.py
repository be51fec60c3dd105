import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammaln

from ellipmeta.elliptical import (
    DensityGenerator,
    GeneratorUnusableError,
    InvalidDofError,
    UnsupportedSamplerError,
    giw_batch,
    giw_mixing_dof,
    inverse_wishart_batch,
    j_constants,
    log_generator,
    sample_giw,
    sample_inverse_wishart,
    sample_model_data,
    sample_model_data_batch,
    sample_multivariate_t,
    sample_r2,
    sample_standard_elliptical,
    score_ratio,
)
from ellipmeta.linalg import spd_from_sym

from conftest import random_spd

NORMAL = DensityGenerator.normal()
T3 = DensityGenerator.student_t(3.0)


class TestLogGenerator:
    def test_normal_origin(self):
        assert log_generator(NORMAL, 0.0, 1, 1) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_t3_origin(self):
        want = gammaln(2.0) - gammaln(1.5) - 0.5 * np.log(3 * np.pi)
        assert log_generator(T3, 0.0, 1, 1) == pytest.approx(want, rel=1e-12)

    def test_normal_exponential_decay(self):
        assert log_generator(NORMAL, 2.0, 2, 3) == pytest.approx(
            log_generator(NORMAL, 0.0, 2, 3) - 1.0
        )

    def test_domain_error(self):
        with pytest.raises(ValueError):
            log_generator(NORMAL, -0.1, 1, 1)


class TestScoreRatio:
    def test_normal_constant(self, rng):
        u = rng.uniform(0, 50, size=20)
        np.testing.assert_array_equal(score_ratio(NORMAL, u, 3, 7), np.full(20, -0.5))

    def test_t_at_origin(self):
        # pn = 20, d = 3: -(pn+d)/(2d)
        assert score_ratio(T3, 0.0, 2, 10) == pytest.approx(-23.0 / 6.0)

    def test_t_large_df_limit(self):
        gen = DensityGenerator.student_t(1e8)
        u = np.linspace(0, 10, 11)
        np.testing.assert_allclose(score_ratio(gen, u, 2, 10), -0.5, rtol=1e-5)

    def test_matches_log_generator_derivative(self, rng):
        u = rng.uniform(0.5, 20, size=10)
        h = 1e-6
        for gen in (NORMAL, T3):
            fd = (log_generator(gen, u + h, 2, 5) - log_generator(gen, u - h, 2, 5)) / (2 * h)
            np.testing.assert_allclose(score_ratio(gen, u, 2, 5), fd, rtol=1e-6)


class TestJConstants:
    def test_normal_closed_form(self):
        j = j_constants(NORMAL, 2, 10)
        assert j.j2 == (40 + 400) / 4.0 == 110.0
        assert j.j1 == 5.0
        assert j.method == "closed_form"

    def test_t_closed_form_j2(self):
        j = j_constants(T3, 2, 10, np.random.default_rng(0))
        assert j.j2 == pytest.approx(20 * 22 * 23 / (4 * 25.0))  # 101.2

    def test_t_j1_monte_carlo_matches_beta_moment(self):
        # Independent check: J1 = pn(pn+d) / (4(pn+d+2)) via Beta moments of
        # R^2/(d+R^2).
        j = j_constants(T3, 2, 10, np.random.default_rng(3), samples=400_000)
        want = 20 * 23 / (4 * 25.0)
        assert j.j1 == pytest.approx(want, rel=0.01)
        assert j.se_j1 is not None and abs(j.j1 - want) < 4 * j.se_j1

    def test_custom_matches_normal(self):
        gen = DensityGenerator.custom(
            log_f=lambda u: -0.5 * u, score=lambda u: np.full_like(np.asarray(u, float), -0.5)
        )
        j = j_constants(gen, 2, 5, np.random.default_rng(5), samples=200_000)
        assert j.method == "monte_carlo"
        assert j.j1 == pytest.approx(10 / 4.0, rel=0.02)
        assert j.j2 == pytest.approx((20 + 100) / 4.0, rel=0.02)

    def test_custom_nonfinite_raises(self):
        gen = DensityGenerator.custom(
            log_f=lambda u: np.where(np.asarray(u) > 1e3, np.nan, -0.5 * np.asarray(u)),
            score=lambda u: np.full_like(np.asarray(u, float), -0.5),
        )
        with pytest.raises(GeneratorUnusableError):
            j_constants(gen, 2, 5, np.random.default_rng(0), samples=10_000)


class TestSampleR2:
    def test_normal_moments(self):
        r2 = sample_r2(NORMAL, 2, 5, 200_000, np.random.default_rng(0))
        assert r2.mean() == pytest.approx(10.0, rel=0.01)

    def test_custom_grid_sampler_matches_normal(self):
        gen = DensityGenerator.custom(
            log_f=lambda u: -0.5 * np.asarray(u), score=lambda u: -0.5 * np.ones_like(u)
        )
        r2 = sample_r2(gen, 1, 4, 200_000, np.random.default_rng(1))
        assert r2.mean() == pytest.approx(4.0, rel=0.02)
        assert np.var(r2) == pytest.approx(8.0, rel=0.05)


class TestStandardElliptical:
    def test_normal_variance(self):
        rng = np.random.default_rng(2)
        big = np.array([sample_standard_elliptical(NORMAL, 1, 1, rng)[0, 0] for _ in range(100_000)])
        assert big.var() == pytest.approx(1.0, rel=0.02)

    def test_t_variance(self):
        rng = np.random.default_rng(3)
        draws = np.array([sample_standard_elliptical(T3, 1, 1, rng)[0, 0] for _ in range(200_000)])
        assert np.median(np.abs(draws)) < np.inf
        assert draws.var() == pytest.approx(3.0, rel=0.08)  # d/(d-2)

    def test_j1_self_consistency(self):
        # E[R^2 (f'/f)^2(R^2)] over sampled matrices reproduces j1.
        rng = np.random.default_rng(4)
        p, n = 2, 3
        vals = []
        for _ in range(100_000):
            z = sample_standard_elliptical(T3, p, n, rng)
            r2 = float(np.sum(z * z))
            vals.append(r2 * score_ratio(T3, r2, p, n) ** 2)
        vals = np.asarray(vals)
        j = j_constants(T3, p, n, np.random.default_rng(9))
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - j.j1) < 3 * np.hypot(se, j.se_j1 or 0.0)

    def test_custom_unsupported(self):
        gen = DensityGenerator.custom(log_f=lambda u: -u, score=lambda u: -np.ones_like(u))
        with pytest.raises(UnsupportedSamplerError):
            sample_standard_elliptical(gen, 2, 2, np.random.default_rng(0))


class TestInverseWishart:
    def test_scalar_mean(self):
        rng = np.random.default_rng(0)
        a = spd_from_sym(np.array([[2.0]]))
        draws = inverse_wishart_batch(6.0, a.mat, 100_000, rng)[:, 0, 0]
        # p=1: inverse-gamma with shape nu/2 - 1, rate A/2; mean = A/(nu-4)
        assert draws.mean() == pytest.approx(1.0, rel=0.02)

    def test_every_draw_spd(self):
        rng = np.random.default_rng(1)
        a = spd_from_sym(random_spd(3, rng))
        for _ in range(20):
            spd_from_sym(sample_inverse_wishart(8.0, a, rng).mat)

    def test_precision_mean(self):
        rng = np.random.default_rng(2)
        draws = inverse_wishart_batch(8.0, np.eye(2), 200_000, rng)
        prec_mean = np.linalg.inv(draws).mean(axis=0)
        np.testing.assert_allclose(prec_mean, 5.0 * np.eye(2), atol=0.05)

    def test_dof_gate(self):
        with pytest.raises(InvalidDofError):
            inverse_wishart_batch(4.0, np.eye(2), 1, np.random.default_rng(0))


class TestGiw:
    def test_normal_delegates(self):
        a = np.array([[2.0]])
        d1 = giw_batch(NORMAL, 6.0, a, 4, 100_000, np.random.default_rng(3))[:, 0, 0]
        d2 = inverse_wishart_batch(6.0, a, 100_000, np.random.default_rng(4))[:, 0, 0]
        assert d1.mean() == pytest.approx(d2.mean(), rel=0.03)

    def test_t_mixture_mean(self):
        # p=1, model n=4 (pn=4), nu = n+p+1 = 6: mixing dof is d itself and
        # E[Psi] = E[xi/d] * E[Omega] = 1 * A/(nu-4) = 1.
        a = spd_from_sym(np.array([[2.0]]))
        rng = np.random.default_rng(5)
        draws = np.array([sample_giw(T3, 6.0, a, 4, rng).mat[0, 0] for _ in range(30_000)])
        assert draws.mean() == pytest.approx(1.0, rel=0.03)

    def test_mixing_dof_rule(self):
        # nu = n+p+1 -> d; nu = n+p+2 -> d-p
        assert giw_mixing_dof(T3, 13.0, 2, 20) == pytest.approx(3.0)
        assert giw_mixing_dof(T3, 14.0, 2, 20) == pytest.approx(1.0)
        with pytest.raises(InvalidDofError):
            giw_mixing_dof(DensityGenerator.student_t(1.5), 14.0, 2, 20)

    def test_density_match_by_quadrature(self):
        # Sampled mean against the density-implied mean for BOTH dof cases,
        # p=1, n=4 model.
        for nu in (6.0, 7.0):
            e = (4 + 3.0) / 2.0
            f = lambda s: s ** (-nu / 2.0) * (1 + 2.0 / (3.0 * s)) ** (-e)
            z0 = quad(f, 0, 1, limit=400)[0] + quad(f, 1, np.inf, limit=400)[0]
            m1 = quad(lambda s: s * f(s), 0, 1, limit=400)[0] + quad(
                lambda s: s * f(s), 1, np.inf, limit=400
            )[0]
            draws = giw_batch(T3, nu, np.array([[2.0]]), 4, 400_000, np.random.default_rng(11))
            assert draws[:, 0, 0].mean() == pytest.approx(m1 / z0, rel=0.03)

    def test_all_draws_spd(self):
        rng = np.random.default_rng(6)
        a = spd_from_sym(random_spd(2, rng))
        for _ in range(20):
            spd_from_sym(sample_giw(T3, 14.0, a, 20, rng).mat)

    def test_custom_unsupported(self):
        gen = DensityGenerator.custom(log_f=lambda u: -u, score=lambda u: -np.ones_like(u))
        with pytest.raises(UnsupportedSamplerError):
            giw_batch(gen, 6.0, np.eye(1), 4, 1, np.random.default_rng(0))


class TestMultivariateT:
    def test_large_df_density_ratio(self):
        from scipy.stats import multivariate_normal, multivariate_t

        grid = np.linspace(-3, 3, 13)
        big = multivariate_t.logpdf(grid[:, None], loc=[0.0], shape=[[1.0]], df=1e7)
        norm = multivariate_normal.logpdf(grid[:, None], mean=[0.0])
        np.testing.assert_allclose(np.exp(big - norm), 1.0, rtol=1e-4)

    def test_variance(self):
        rng = np.random.default_rng(7)
        draws = np.array(
            [sample_multivariate_t(5.0, np.zeros(1), np.eye(1), rng)[0] for _ in range(200_000)]
        )
        assert draws.var() == pytest.approx(5.0 / 3.0, rel=0.03)

    def test_location(self):
        rng = np.random.default_rng(8)
        loc = np.array([7.0, -7.0])
        draws = np.array(
            [sample_multivariate_t(10.0, loc, np.eye(2), rng) for _ in range(50_000)]
        )
        np.testing.assert_allclose(draws.mean(axis=0), loc, atol=0.03)


class TestModelData:
    def test_normal_covariance(self, rng):
        psi = random_spd(2, rng)
        u = np.stack([random_spd(2, rng)] * 4)
        x = sample_model_data_batch(np.zeros(2), psi, u, NORMAL, 100_000, rng)
        cols = x.transpose(0, 2, 1).reshape(-1, 2)
        np.testing.assert_allclose(
            np.cov(cols.T), psi + u[0], rtol=0.04, atol=0.02
        )

    def test_t_covariance_scaling(self, rng):
        psi = random_spd(2, rng)
        u = np.stack([random_spd(2, rng)] * 4)
        x = sample_model_data_batch(np.zeros(2), psi, u, T3, 400_000, rng)
        cols = x.transpose(0, 2, 1).reshape(-1, 2)
        np.testing.assert_allclose(np.cov(cols.T), 3.0 * (psi + u[0]), rtol=0.12)

    def test_degenerate_exact(self):
        x = sample_model_data(
            np.array([1.0, 2.0]),
            np.zeros((2, 2)),
            np.zeros((3, 2, 2)),
            NORMAL,
            np.random.default_rng(0),
        )
        np.testing.assert_array_equal(x, np.array([[1.0], [2.0]]) @ np.ones((1, 3)))

    def test_shared_mixing_for_t(self):
        # One chi-square per sample: columns of a draw are strongly dependent
        # in magnitude, unlike independent per-study t draws.
        rng = np.random.default_rng(9)
        u = np.zeros((2, 1, 1))
        x = sample_model_data_batch(np.zeros(1), np.eye(1), u, T3, 200_000, rng)[:, 0, :]
        corr = np.corrcoef(np.abs(x[:, 0]), np.abs(x[:, 1]))[0, 1]
        assert corr > 0.2

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sample_model_data(np.zeros(2), np.eye(3), np.zeros((2, 2, 2)), NORMAL, np.random.default_rng(0))
