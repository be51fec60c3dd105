import numpy as np
import pytest

from ellipmeta.elliptical import DensityGenerator, j_constants
from ellipmeta.oracle import (
    GridTooSmallError,
    factorization_consistency,
    mc_fisher_info,
    mcmc_vs_quadrature,
    quadrature_posterior_1d,
)
from ellipmeta.posterior import Dataset
from ellipmeta.priors import fisher_f11, fisher_f22

from conftest import random_spd

NORMAL = DensityGenerator.normal()
T3 = DensityGenerator.student_t(3.0)


class TestMcFisherInfo:
    def test_classical_unit_case(self):
        rng = np.random.default_rng(0)
        f = mc_fisher_info(NORMAL, np.array([[0.5]]), np.array([[[0.5]]]), 50_000, rng)
        assert f[0, 0] == pytest.approx(1.0, rel=0.05)

    def test_block_structure_and_values(self):
        rng = np.random.default_rng(1)
        p, n = 2, 3
        psi = random_spd(p, rng)
        u = np.stack([random_spd(p, rng) for _ in range(n)])
        j = j_constants(NORMAL, p, n)
        fhat = mc_fisher_info(NORMAL, psi, u, 200_000, rng)
        f11 = fisher_f11(psi, u, j, p, n)
        f22 = fisher_f22(psi, u, j, p, n)
        assert np.linalg.norm(fhat[:p, :p] - f11) / np.linalg.norm(f11) < 0.05
        assert np.linalg.norm(fhat[p:, p:] - f22) / np.linalg.norm(f22) < 0.05
        assert np.linalg.norm(fhat[p:, :p]) / np.linalg.norm(f11) < 0.05

    def test_sample_floor(self):
        with pytest.raises(ValueError):
            mc_fisher_info(NORMAL, np.eye(1), np.ones((1, 1, 1)), 100, np.random.default_rng(0))


class TestQuadrature1d:
    def test_requires_scalar_effects(self, rng):
        d = Dataset.create(rng.standard_normal((4, 2)), np.stack([np.eye(2)] * 4))
        with pytest.raises(ValueError):
            quadrature_posterior_1d(d, "reference", NORMAL)

    def test_zero_within_cov_centers_at_mean(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 1)) + 2.0
        d = Dataset.create(x, np.zeros((6, 1, 1)))
        q = quadrature_posterior_1d(d, "reference", NORMAL)
        assert q.mu_mean == pytest.approx(float(x.mean()), abs=1e-6)

    def test_symmetric_data(self):
        d = Dataset.create([[-1.3], [1.3]], [[[0.4]], [[0.4]]])
        q = quadrature_posterior_1d(d, "jeffreys", NORMAL)
        assert q.mu_mean == pytest.approx(0.0, abs=1e-8)

    def test_refinement_is_stable(self, scalar_five_study):
        q = quadrature_posterior_1d(scalar_five_study, "reference", NORMAL)
        assert q.refinement_change < 1e-3


class TestFactorizationConsistency:
    @pytest.mark.parametrize("gen", [NORMAL, T3], ids=["normal", "t3"])
    @pytest.mark.parametrize("kind", ["reference", "jeffreys"])
    def test_consistent(self, gen, kind, rng):
        x = rng.multivariate_normal(np.zeros(2), np.eye(2), size=10)
        u = np.stack([random_spd(2, rng) for _ in range(10)])
        data = Dataset.create(x, u)
        rep = factorization_consistency(
            kind, data, gen, moment_draws=30_000, rng=np.random.default_rng(0)
        )
        assert rep.passed, [c.name for c in rep.checks if not c.passed]

    def test_corrupted_dof_detected(self, rng):
        # Negative control: a wrong conditional dof must break the analytic
        # identity.
        x = rng.multivariate_normal(np.zeros(2), np.eye(2), size=10)
        u = np.stack([random_spd(2, rng) for _ in range(10)])
        data = Dataset.create(x, u)
        rep = factorization_consistency(
            "reference", data, NORMAL, moment_draws=2_000, rng=np.random.default_rng(0), giw_nu=14.0
        )
        analytic = [c for c in rep.checks if "factorized" in c.name]
        assert any(not c.passed for c in analytic)


class TestMcmcVsQuadrature:
    def test_scalar_reference(self, scalar_five_study):
        rep = mcmc_vs_quadrature(
            scalar_five_study, "reference", NORMAL, draws=30_000, seed=4, mean_rtol=0.03, sd_rtol=0.08
        )
        assert rep.passed, rep.to_dict()
