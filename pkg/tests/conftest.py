import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from distextremes.extremes_core import DependenceParams
from distextremes.local_fit import BlockData
from distextremes.simulate import SimConfig, simulate_gev_field, stationary_margins

VERDICTS = pytest.StashKey[list]()

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

THETA0 = (0.8, 10.0, 0.5, 0.5, 1.5, 0.2)


def grid(side, start=1.0):
    r = np.arange(side, dtype=float) + start
    return np.array([(a, b) for a in r for b in r])


def setting_one(sites, n, seed, theta0=THETA0, exact=True):
    """GEV field with mu = s @ (b11, b12), log sigma = b2, xi = b3."""
    a, ph, b11, b12, b2, b3 = theta0
    cfg = SimConfig(sites, n, DependenceParams.from_natural(a, ph),
                    stationary_margins(sites, [b11, b12], b2, b3), seed=seed, exact=exact)
    return simulate_gev_field(cfg)


def block_from(sites, y, q=0.8, linear_mu=True, block_id=0):
    u = np.quantile(y, q, axis=0)
    return BlockData(sites, y, u, z1=sites if linear_mu else None, block_id=block_id)


def true_theta(theta0=THETA0):
    a, ph = theta0[:2]
    w, z = np.log(a / (2 - a)), np.log(ph)
    return np.array([w, z, *theta0[2:]])


@pytest.fixture(scope="session")
def small_block():
    sites = grid(3)
    y = setting_one(sites, 150, seed=11)
    return block_from(sites, y)


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        request.config.stash[VERDICTS].append((number, line))
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
