import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from distextremes.diagnostics import (
    annual_return_level, pit_values, return_level, return_level_linear, site_uniformity,
    uniformity_test,
)
from distextremes.errors import ConfigError

shapes = st.floats(-0.4, 0.6)


def gev_quantile(p, mu, sigma, xi):
    return stats.genextreme.ppf(p, -xi, loc=mu, scale=sigma)


class TestReturnLevel:
    def test_unit_frechet_value(self):
        # exp(-12 / y) = 0.98 for unit Frechet months
        assert annual_return_level(1.0, 1.0, 1.0, 50) == pytest.approx(-12 / np.log(0.98),
                                                                         rel=1e-12)
        assert annual_return_level(1.0, 1.0, 1.0, 50) == pytest.approx(593.98, abs=1e-2)

    @given(st.floats(-5, 5), st.floats(0.1, 5), shapes, st.floats(1.5, 1000))
    def test_identical_months(self, mu, sigma, xi, r):
        want = gev_quantile((1 - 1 / r) ** (1 / 12), mu, sigma, xi)
        assert annual_return_level(mu, sigma, xi, r) == pytest.approx(want, rel=1e-8, abs=1e-9)

    def test_single_month(self):
        assert annual_return_level(0.0, 1.0, 0.0, 10, months_per_year=1) == pytest.approx(
            -np.log(-np.log(0.9)))

    @given(st.lists(st.floats(-2, 2), min_size=12, max_size=12), shapes)
    def test_between_months_and_monotone(self, mus, xi):
        mus = np.array(mus)
        levels = [annual_return_level(mus, 1.0, xi, r) for r in (1.01, 2, 10, 100)]
        assert np.all(np.diff(levels) > 0)
        y = levels[2]
        p = np.prod(stats.genextreme.cdf(y, -xi, loc=mus, scale=1.0))
        assert p == pytest.approx(0.9, rel=1e-9)

    def test_bad_period(self):
        with pytest.raises(ConfigError):
            annual_return_level(0, 1, 0, 1.0)

    @given(st.integers(0, 10 ** 6))
    def test_linear_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        D1, D2, D3 = (rng.normal(size=(12, 4)) * s for s in (1.0, 0.2, 0.05))
        theta = rng.normal(size=4)
        A = rng.normal(size=(4, 4))
        cov = A @ A.T
        lvl, se = return_level_linear(D1, D2, D3, theta, cov, 20)
        fn = lambda t: (D1 @ t, np.exp(D2 @ t), D3 @ t)  # noqa: E731
        lvl2, se2 = return_level(fn, theta, cov, 20)
        assert lvl == lvl2
        assert se == pytest.approx(se2, rel=1e-5)


class TestPit:
    @given(st.floats(-5, 5), st.floats(0.1, 5), shapes)
    def test_median(self, mu, sigma, xi):
        m = gev_quantile(0.5, mu, sigma, xi)
        u, flag = pit_values(m, mu, sigma, xi)
        assert u == pytest.approx(0.5, rel=1e-9) and flag == 0

    def test_support_flags(self):
        u, flag = pit_values(np.array([-11.0, 0.0, np.nan]), 0.0, 1.0, 0.1)
        assert u[0] == 0.0 and flag[0] == -1 and flag[1] == 0 and np.isnan(u[2])
        u, flag = pit_values(np.array([11.0]), 0.0, 1.0, -0.1)
        assert u[0] == 1.0 and flag[0] == 1

    def test_site_uniformity(self):
        rng = np.random.default_rng(0)
        u = rng.uniform(size=(500, 8))
        pv, comb = site_uniformity(u)
        assert pv.shape == (8,) and comb == min(1.0, 8 * pv.min())
        u[:, 3] = u[:, 3] ** 2
        assert site_uniformity(u)[1] < 1e-6
        assert uniformity_test(rng.uniform(size=1000)).pvalue > 1e-4
