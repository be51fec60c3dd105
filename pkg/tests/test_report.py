import numpy as np
import pytest

from ellipmeta.elliptical import DensityGenerator
from ellipmeta.mcmc import Draws, SamplerConfig, run_chain
from ellipmeta.posterior import Dataset, PosteriorKernel
from ellipmeta.report import (
    CoverageDesign,
    coverage_experiment,
    credible_region_2d,
    summarize,
)

from conftest import random_spd

NORMAL = DensityGenerator.normal()


def synthetic_draws(mu, acceptance=0.5, ess=None):
    """Wrap raw mean draws into the Draws container for summary tests."""
    mu = np.asarray(mu, dtype=float)
    m, p = mu.shape
    return Draws(
        mu=mu,
        psi=np.repeat(np.eye(p)[None], m, axis=0),
        accepted=np.ones(m, dtype=bool),
        log_posterior=np.zeros(m),
        xtilde=mu,
        c=np.ones(m),
        cond_cov=np.repeat(np.eye(p)[None], m, axis=0),
        acceptance_rate=acceptance,
        ess=np.full(p, float(m)) if ess is None else ess,
        config=SamplerConfig(draws=max(m, 1)),
    )


class TestSummarize:
    def test_standard_normal_interval(self):
        rng = np.random.default_rng(0)
        draws = synthetic_draws(rng.standard_normal((1_000_000, 1)))
        rep = summarize(draws, 0.95)
        assert rep.mu[0].ci_low == pytest.approx(-1.96, abs=0.02)
        assert rep.mu[0].ci_high == pytest.approx(1.96, abs=0.02)
        assert rep.mu[0].median == pytest.approx(0.0, abs=0.01)

    def test_constant_draws(self):
        draws = synthetic_draws(np.full((500, 2), 3.25))
        rep = summarize(draws, 0.9)
        c = rep.mu[1]
        assert (c.mean, c.median, c.sd, c.ci_low, c.ci_high) == (3.25, 3.25, 0.0, 3.25, 3.25)

    def test_interval_ordering_and_monotone_level(self):
        rng = np.random.default_rng(1)
        draws = synthetic_draws(rng.standard_normal((50_000, 1)))
        r1 = summarize(draws, 0.5)
        r2 = summarize(draws, 0.95)
        assert r1.mu[0].ci_low <= r1.mu[0].median <= r1.mu[0].ci_high
        assert r2.mu[0].ci_low < r1.mu[0].ci_low and r1.mu[0].ci_high < r2.mu[0].ci_high

    def test_empty_rejected(self):
        draws = synthetic_draws(np.zeros((0, 1)))
        with pytest.raises(ValueError):
            summarize(draws, 0.95)

    def test_bad_level(self):
        draws = synthetic_draws(np.zeros((10, 1)))
        with pytest.raises(ValueError):
            summarize(draws, 1.0)


class TestCredibleRegion2d:
    def test_gaussian_area(self):
        rng = np.random.default_rng(2)
        sigma = 0.7
        draws = synthetic_draws(rng.multivariate_normal([0, 0], sigma**2 * np.eye(2), 200_000))
        regions = credible_region_2d(draws, (0, 1), (0.95,), grid_size=200)
        want = np.pi * 5.991464547 * sigma**2  # chi2_2 quantile at 0.95
        assert regions.regions[0.95].area == pytest.approx(want, rel=0.10)

    def test_nested_levels(self):
        rng = np.random.default_rng(3)
        draws = synthetic_draws(rng.multivariate_normal([1, -1], [[1.0, 0.4], [0.4, 0.6]], 50_000))
        regions = credible_region_2d(draws)
        m90 = regions.regions[0.9].mask
        m95 = regions.regions[0.95].mask
        m99 = regions.regions[0.99].mask
        assert np.all(m95[m90]) and np.all(m99[m95])

    def test_contains_mean_and_polygons_close(self):
        rng = np.random.default_rng(4)
        draws = synthetic_draws(rng.multivariate_normal([2, 3], np.eye(2), 20_000))
        regions = credible_region_2d(draws, levels=(0.9,))
        reg = regions.regions[0.9]
        ix = np.searchsorted(regions.x_edges, 2.0) - 1
        iy = np.searchsorted(regions.y_edges, 3.0) - 1
        assert reg.mask[ix, iy]
        assert reg.polygons, "expected at least one contour polygon"
        for poly in reg.polygons:
            np.testing.assert_allclose(poly[0], poly[-1], atol=1e-9)

    def test_too_few_draws(self):
        draws = synthetic_draws(np.zeros((500, 2)))
        with pytest.raises(ValueError):
            credible_region_2d(draws)


class TestCoverageExperiment:
    def test_small_run_reproducible_and_sane(self):
        design = CoverageDesign(
            p=2,
            n_values=(10,),
            tau2_values=(1.0,),
            prior_kinds=("jeffreys",),
            variants=("B",),
            replications=20,
            draws=4000,
            master_seed=7,
        )
        r1 = coverage_experiment(design)
        r2 = coverage_experiment(design)
        assert [c.coverage for c in r1.cells] == [c.coverage for c in r2.cells]
        cell = r1.cells[0]
        assert 0.7 <= cell.coverage <= 1.0
        assert cell.replications == 20

    def test_degenerate_heterogeneity_floor(self):
        # tau^2 = 0 with fixed parameters: intervals remain conservative.
        design = CoverageDesign(
            p=2,
            n_values=(10,),
            tau2_values=(0.0,),
            prior_kinds=("reference",),
            variants=("B",),
            replications=20,
            draws=4000,
            master_seed=11,
        )
        res = coverage_experiment(design)
        assert res.cells[0].coverage >= 0.9

    def test_reference_wider_than_jeffreys_on_average(self):
        # Same data per replication for both priors; compare mean interval
        # widths over 50 seeds in a homoscedastic normal case.
        rng = np.random.default_rng(12)
        widths = {"reference": [], "jeffreys": []}
        for seed in range(50):
            data_rng = np.random.default_rng(seed)
            x = data_rng.multivariate_normal([2.0, 2.0], 1.5 * np.eye(2), size=10)
            u = np.stack([np.eye(2)] * 10)
            d = Dataset.create(x, u)
            for kind in widths:
                kern = PosteriorKernel.build(d, kind, NORMAL)
                out = run_chain(
                    SamplerConfig(variant="B", prior_kind=kind, draws=4000, seed=seed), kern
                )
                lo, hi = np.quantile(out.mu[:, 0], [0.025, 0.975])
                widths[kind].append(hi - lo)
        assert np.mean(widths["reference"]) > np.mean(widths["jeffreys"])
