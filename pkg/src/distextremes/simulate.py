"""Brown-Resnick fields with unit-Frechet or GEV margins.

The default sampler is exact: it follows the extremal-functions construction,
adding one spectral function at a time for each site in turn and accepting it
only if it does not exceed the maxima already fixed at earlier sites. A cheaper
approximate sampler (maximum over a fixed number of log-Gaussian spectral
functions) is available with ``exact=False``.

Every replicate draws from its own ``SeedSequence`` child, so the output does
not depend on how replicates are split among workers.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, DegenerateGeometryError
from .extremes_core import DependenceParams, frechet_to_gev, semivariogram

N_SPECTRAL = 1000
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class Margins:
    """GEV parameters broadcastable to ``(n, d)``."""

    mu: np.ndarray | float = 1.0
    sigma: np.ndarray | float = 1.0
    xi: np.ndarray | float = 1.0


@dataclass(frozen=True)
class SimConfig:
    sites: np.ndarray
    n: int
    dep: DependenceParams
    margins: Margins = field(default_factory=Margins)
    seed: int = 0
    exact: bool = True
    workers: int = 1

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=float)
        if sites.ndim != 2 or sites.shape[1] != 2 or sites.shape[0] < 1:
            raise ConfigError("sites must have shape (d, 2)")
        if np.unique(sites, axis=0).shape[0] != sites.shape[0]:
            raise ConfigError("sites must be distinct")
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        object.__setattr__(self, "sites", sites)


def stationary_margins(sites, beta1, beta2, beta3) -> Margins:
    """Margins with ``mu = s @ beta1``, ``log sigma = beta2``, ``xi = beta3``."""
    sites = np.asarray(sites, dtype=float)
    return Margins(mu=sites @ np.asarray(beta1, dtype=float),
                   sigma=float(np.exp(beta2)), xi=float(beta3))


def pinned_cholesky(sites, alpha, phi):
    """Cholesky factor of ``W(s) - W(s_0)`` over sites ``1..d-1``.

    ``W`` has variogram ``2 (h / phi) ** alpha``. Returns ``(L, gamma)`` where
    ``gamma`` is the full matrix of pairwise semivariogram values.
    """
    gamma = semivariogram(cdist(sites, sites), alpha, phi)
    d = sites.shape[0]
    if d == 1:
        return np.zeros((0, 0)), gamma
    g0 = gamma[0, 1:]
    cov = g0[:, None] + g0[None, :] - gamma[1:, 1:]
    scale = float(np.mean(np.diag(cov)))
    eye = np.eye(d - 1)
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(cov + jitter * scale * eye), gamma
        except np.linalg.LinAlgError:
            continue
    raise DegenerateGeometryError("Gaussian covariance is not positive definite even with jitter 1e-6")


def _gaussian(rng, L):
    w = np.zeros(L.shape[0] + 1)
    w[1:] = L @ rng.standard_normal(L.shape[0])
    return w


def _replicate_exact(rng, L, gamma):
    d = gamma.shape[0]
    Z = np.zeros(d)
    for j in range(d):
        e = rng.standard_exponential()
        zeta = 1.0 / e
        while zeta > Z[j]:
            w = _gaussian(rng, L)
            Y = np.exp(w - w[j] - gamma[:, j])
            if j == 0 or np.all(zeta * Y[:j] < Z[:j]):
                np.maximum(Z, zeta * Y, out=Z)
            e += rng.standard_exponential()
            zeta = 1.0 / e
    return Z


def _replicate_spectral(rng, L, gamma, n_spectral=N_SPECTRAL):
    d = gamma.shape[0]
    arrivals = np.cumsum(rng.standard_exponential(n_spectral))
    W = np.zeros((n_spectral, d))
    W[:, 1:] = rng.standard_normal((n_spectral, d - 1)) @ L.T
    # exp(W - Var(W)/2) has unit mean at every site
    Y = np.exp(W - gamma[0][None, :])
    return np.max(Y / arrivals[:, None], axis=0)


def _simulate_range(args):
    seeds, sites, alpha, phi, exact = args
    L, gamma = pinned_cholesky(sites, alpha, phi)
    draw = _replicate_exact if exact else _replicate_spectral
    out = np.empty((len(seeds), sites.shape[0]))
    for r, ss in enumerate(seeds):
        out[r] = draw(np.random.Generator(np.random.PCG64(ss)), L, gamma)
    return out


def simulate_frechet_field(cfg: SimConfig) -> np.ndarray:
    """``n`` independent Brown-Resnick replicates with unit-Frechet margins."""
    alpha, phi = cfg.dep.alpha, cfg.dep.phi
    pinned_cholesky(cfg.sites, alpha, phi)  # fail fast before spawning workers
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n)
    workers = max(1, int(cfg.workers))
    if workers == 1:
        return _simulate_range((seeds, cfg.sites, alpha, phi, cfg.exact))
    chunks = [c for c in np.array_split(np.arange(cfg.n), workers) if c.size]
    tasks = [([seeds[i] for i in c], cfg.sites, alpha, phi, cfg.exact) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_simulate_range, tasks))
    return np.vstack(parts)


def simulate_gev_field(cfg: SimConfig) -> np.ndarray:
    """Brown-Resnick replicates transformed to the configured GEV margins."""
    x = simulate_frechet_field(cfg)
    m = cfg.margins
    return frechet_to_gev(x, m.mu, m.sigma, m.xi)


def write_dataset(outdir, sites, y, site_ids=None, extra_site_columns=None):
    """Write ``sites.csv`` and ``observations.csv`` in the ingest format."""
    os.makedirs(outdir, exist_ok=True)
    sites = np.asarray(sites, dtype=float)
    y = np.asarray(y, dtype=float)
    d = sites.shape[0]
    site_ids = [f"s{j + 1}" for j in range(d)] if site_ids is None else list(site_ids)
    extra = dict(extra_site_columns or {})
    with open(os.path.join(outdir, "sites.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "x", "y", *extra])
        for j in range(d):
            w.writerow([site_ids[j], repr(float(sites[j, 0])), repr(float(sites[j, 1])),
                        *(extra[c][j] for c in extra)])
    with open(os.path.join(outdir, "observations.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate_id", "site_id", "value"])
        for i in range(y.shape[0]):
            for j in range(d):
                w.writerow([i + 1, site_ids[j], repr(float(y[i, j]))])
