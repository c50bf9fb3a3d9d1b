"""Closed-form pieces of the Brown-Resnick censored pairwise model.

Everything here is a pure function of its arguments. Scalar helpers take
``GevParams`` / ``DependenceParams`` objects; the array kernels at the bottom
(:func:`log_frechet_terms`, :func:`censored_pair_terms`) are what the block
likelihood uses and work elementwise on numpy arrays of any shape.

Conventions
-----------
``x`` always denotes a unit-Frechet value and ``l = log(x)``. For a pair of
sites at separation ``h`` the dependence enters only through
``a = sqrt(2 * (h / phi) ** alpha)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ParameterDomainError, SupportError

#: |xi| below this switches to the Gumbel (exponential) branch.
XI_TOL = 1e-8
#: |xi| below this evaluates d log(x) / d xi by its Taylor series.
_XI_SERIES_TOL = 1e-4
#: admissible interval for the GEV shape during optimization
XI_BOUNDS = (-0.5 + 1e-3, 1.0)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# normal distribution helpers (the single implementation used everywhere)


def norm_cdf(q):
    """Standard normal CDF, evaluated through ``erfc`` (``scipy.special.ndtr``)."""
    return special.ndtr(q)


def log_norm_cdf(q):
    """log of the standard normal CDF, accurate far into the lower tail."""
    return special.log_ndtr(q)


def log_norm_pdf(q):
    q = np.asarray(q, dtype=float)
    return -0.5 * q * q - _LOG_SQRT_2PI


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class GevParams:
    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterDomainError(f"GEV scale must be positive, got {self.sigma}")
        if not np.isfinite(self.mu) or not np.isfinite(self.xi):
            raise ParameterDomainError("GEV location and shape must be finite")


@dataclass(frozen=True)
class DependenceParams:
    """Brown-Resnick dependence on the optimization scale.

    ``omega = log(alpha / (2 - alpha))`` and ``zeta = log(phi)``.
    """

    omega: float
    zeta: float

    @property
    def alpha(self) -> float:
        return float(2.0 * special.expit(self.omega))

    @property
    def phi(self) -> float:
        return float(np.exp(self.zeta))

    @classmethod
    def from_natural(cls, alpha: float, phi: float) -> "DependenceParams":
        omega, zeta = natural_to_working(alpha, phi)
        return cls(omega, zeta)


def natural_scale(dep: DependenceParams) -> tuple[float, float]:
    """Return ``(alpha, phi)`` for working-scale dependence parameters."""
    return dep.alpha, dep.phi


def natural_to_working(alpha: float, phi: float) -> tuple[float, float]:
    """Inverse of :func:`natural_scale`: ``(alpha, phi) -> (omega, zeta)``."""
    if not 0.0 < alpha < 2.0:
        raise ParameterDomainError(f"alpha must lie in (0, 2), got {alpha}")
    if not phi > 0.0:
        raise ParameterDomainError(f"phi must be positive, got {phi}")
    return float(np.log(alpha / (2.0 - alpha))), float(np.log(phi))


@dataclass(frozen=True)
class PairLikContext:
    """Per-pair quantities: dependence scalar and Frechet-scale thresholds."""

    a12: float
    u1f: float = 1.0
    u2f: float = 1.0

    def __post_init__(self):
        if not self.a12 > 0:
            raise ParameterDomainError(f"a12 must be positive, got {self.a12}")
        if not (self.u1f > 0 and self.u2f > 0):
            raise ParameterDomainError("Frechet thresholds must be positive")


# ---------------------------------------------------------------------------
# variogram


def semivariogram(h, alpha, phi):
    """Isotropic power semivariogram ``(h / phi) ** alpha``."""
    if not phi > 0:
        raise ParameterDomainError(f"phi must be positive, got {phi}")
    if not 0 < alpha <= 2:
        raise ParameterDomainError(f"alpha must lie in (0, 2], got {alpha}")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ParameterDomainError("distances must be nonnegative")
    out = (h / phi) ** alpha
    return float(out) if out.ndim == 0 else out


def pair_scale(h, alpha, phi):
    """``a = sqrt(2 * gamma(h))`` for the Brown-Resnick pair at distance ``h``."""
    return np.sqrt(2.0 * np.asarray(semivariogram(h, alpha, phi)))


# ---------------------------------------------------------------------------
# marginal transforms


def _standardized(y, mu, sigma, xi):
    z = (np.asarray(y, dtype=float) - mu) / sigma
    return z, 1.0 + xi * z


def _log_frechet_from_z(z, xi):
    xi = np.asarray(xi, dtype=float)
    small = np.abs(xi) < XI_TOL
    safe_xi = np.where(small, 1.0, xi)
    with np.errstate(invalid="ignore", divide="ignore"):
        ell = np.log1p(safe_xi * z) / safe_xi
    return np.where(small, z, ell)


def _check_support(t, y, what="observation"):
    bad = ~(np.asarray(t) > 0)
    if np.any(bad):
        idx = np.flatnonzero(np.ravel(bad))[0]
        val = np.ravel(np.broadcast_to(np.asarray(y, dtype=float), np.shape(t)))[idx]
        raise SupportError(
            f"{what} {val!r} (flat index {idx}) lies outside the GEV support",
            site=int(idx),
            value=float(val),
        )


def gev_to_frechet(y, g: GevParams):
    """Map GEV data ``y`` to the unit-Frechet scale.

    Raises
    ------
    SupportError
        If ``1 + xi (y - mu) / sigma <= 0`` anywhere.
    """
    z, t = _standardized(y, g.mu, g.sigma, g.xi)
    if abs(g.xi) >= XI_TOL:
        _check_support(t, y)
    out = np.exp(_log_frechet_from_z(z, g.xi))
    return float(out) if out.ndim == 0 else out


def frechet_jacobian(y, g: GevParams):
    """dx/dy of :func:`gev_to_frechet`, i.e. ``x ** (1 - xi) / sigma``."""
    x = np.asarray(gev_to_frechet(y, g))
    out = x ** (1.0 - g.xi) / g.sigma
    return float(out) if out.ndim == 0 else out


def frechet_to_gev(x, mu, sigma, xi):
    """Inverse transform ``y = mu + sigma (x ** xi - 1) / xi`` (vectorized)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    lx = np.log(x)
    small = np.abs(xi) < XI_TOL
    safe_xi = np.where(small, 1.0, xi)
    y = mu + sigma * np.where(small, lx, np.expm1(safe_xi * lx) / safe_xi)
    return float(y) if np.ndim(y) == 0 else y


def gev_cdf(y, mu, sigma, xi):
    """GEV distribution function, with the limits 0 / 1 outside the support."""
    z, t = _standardized(y, mu, sigma, xi)
    xi = np.broadcast_to(np.asarray(xi, dtype=float), np.shape(t))
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        ell = _log_frechet_from_z(z, xi)
        out = np.exp(-np.exp(-ell))
    below = (t <= 0) & (xi > 0)
    above = (t <= 0) & (xi < 0)
    out = np.where(below, 0.0, np.where(above, 1.0, out))
    return float(out) if out.ndim == 0 else out


def log_frechet_terms(v, mu, log_sigma, xi):
    """Log-Frechet value of ``v`` and its derivatives, elementwise.

    Returns a dict with

    ``ell``      log x, where ``x = (1 + xi z) ** (1 / xi)``, ``z = (v - mu) / sigma``
    ``t``        ``1 + xi z`` (support requires ``t > 0``)
    ``d_mu``     d ell / d mu
    ``d_ls``     d ell / d log(sigma)
    ``d_xi``     d ell / d xi
    ``log_jac``  log of dx/dv = ``(1 - xi) ell - log(sigma)``
    ``dj_mu``, ``dj_ls``, ``dj_xi``  derivatives of ``log_jac``

    Entries outside the support are NaN; callers test ``t > 0``.
    """
    sigma = np.exp(log_sigma)
    z = (v - mu) / sigma
    xi = np.asarray(xi, dtype=float)
    t = 1.0 + xi * z
    with np.errstate(invalid="ignore", divide="ignore"):
        ell = _log_frechet_from_z(z, xi)
        inv_t = 1.0 / t
        d_mu = -inv_t / sigma
        d_ls = -z * inv_t
        series = np.abs(xi) < _XI_SERIES_TOL
        safe_xi = np.where(series, 1.0, xi)
        d_xi_exact = (z * inv_t - ell) / safe_xi
        z2 = z * z
        d_xi_series = -0.5 * z2 + (2.0 / 3.0) * xi * z2 * z - 0.75 * xi * xi * z2 * z2
        d_xi = np.where(series, d_xi_series, d_xi_exact)
    one_m_xi = 1.0 - xi
    return {
        "ell": ell,
        "t": t,
        "d_mu": d_mu,
        "d_ls": d_ls,
        "d_xi": d_xi,
        "log_jac": one_m_xi * ell - log_sigma,
        "dj_mu": one_m_xi * d_mu,
        "dj_ls": one_m_xi * d_ls - 1.0,
        "dj_xi": one_m_xi * d_xi - ell,
    }


# ---------------------------------------------------------------------------
# exponential measure


def _check_positive(*xs):
    for x in xs:
        if np.any(~(np.asarray(x, dtype=float) > 0)):
            raise ParameterDomainError("exponential measure needs positive arguments")


def _q(x1, x2, a):
    lr = np.log(x2) - np.log(x1)
    return 0.5 * a + lr / a, 0.5 * a - lr / a


def exponential_measure(x1, x2, ctx: PairLikContext | float):
    """Brown-Resnick (Husler-Reiss) bivariate exponential measure ``V(x1, x2)``."""
    a = ctx.a12 if isinstance(ctx, PairLikContext) else ctx
    _check_positive(x1, x2, a)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    q1, q2 = _q(x1, x2, a)
    out = norm_cdf(q1) / x1 + norm_cdf(q2) / x2
    return float(out) if np.ndim(out) == 0 else out


def exponential_measure_partials(x1, x2, ctx: PairLikContext | float):
    """Analytic ``(dV/dx1, dV/dx2, d2V/dx1dx2)``.

    The identity ``phi(q1) / x1 = phi(q2) / x2`` collapses the first partials to
    ``-Phi(q_j) / x_j**2``.
    """
    a = ctx.a12 if isinstance(ctx, PairLikContext) else ctx
    _check_positive(x1, x2, a)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    q1, q2 = _q(x1, x2, a)
    v1 = -norm_cdf(q1) / x1**2
    v2 = -norm_cdf(q2) / x2**2
    v12 = -np.exp(log_norm_pdf(q1)) / (a * x1**2 * x2)
    if np.ndim(v1) == 0:
        return float(v1), float(v2), float(v12)
    return v1, v2, v12


def bivariate_density(x1, x2, ctx: PairLikContext | float):
    """Density of the unit-Frechet pair: ``exp(-V) (V1 V2 - V12)``."""
    v = exponential_measure(x1, x2, ctx)
    v1, v2, v12 = exponential_measure_partials(x1, x2, ctx)
    out = np.exp(-np.asarray(v)) * (np.asarray(v1) * v2 - v12)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# censored pair contribution


def censored_pair_terms(l1, l2, a, e1, e2, derivatives=True):
    """Four-case censored log-contribution on the log-Frechet scale.

    Parameters
    ----------
    l1, l2 : array_like
        ``log x`` of the effective values: the observation where it exceeds
        its threshold, otherwise the Frechet-scale threshold.
    a : array_like
        Pair dependence scalar.
    e1, e2 : array_like of bool
        Exceedance indicators.

    Returns
    -------
    value, or ``(value, d/dl1, d/dl2, d/da)`` when ``derivatives`` is true.

    The marginal Jacobian terms ``log J`` of exceeding coordinates are *not*
    included; they are per-site quantities added by the caller.
    """
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    a = np.asarray(a, dtype=float)
    lr = l2 - l1
    q1 = 0.5 * a + lr / a
    q2 = 0.5 * a - lr / a
    lP1 = log_norm_cdf(q1)
    lP2 = log_norm_cdf(q2)
    lp1 = log_norm_pdf(q1)
    P1x1 = np.exp(lP1 - l1)
    P2x2 = np.exp(lP2 - l2)
    V = P1x1 + P2x2

    both = e1 & e2
    only1 = e1 & ~e2
    only2 = e2 & ~e1

    log_a = np.log(a)
    lE = np.logaddexp(lP1 + lP2, lp1 + l2 - log_a)
    value = -V
    value = value + np.where(both, lE - 2.0 * (l1 + l2), 0.0)
    value = value + np.where(only1, lP1 - 2.0 * l1, 0.0)
    value = value + np.where(only2, lP2 - 2.0 * l2, 0.0)
    if not derivatives:
        return value

    p1x1 = np.exp(lp1 - l1)
    m1 = np.exp(lp1 - lP1)
    m2 = np.exp(log_norm_pdf(q2) - lP2)
    inv_a = 1.0 / a
    dq1_da = 0.5 - lr * inv_a * inv_a
    dq2_da = 0.5 + lr * inv_a * inv_a

    # -V part, common to every case
    d1 = P1x1.copy()
    d2 = P2x2.copy()
    da = -p1x1

    # both exceed: log E with E = P1 P2 + p1 x2 / a
    wA = np.exp(lP1 + lP2 - lE)
    wB = np.exp(lp1 + l2 - log_a - lE)
    d1 = d1 + np.where(both, wA * (m2 - m1) * inv_a + wB * q1 * inv_a - 2.0, 0.0)
    d2 = d2 + np.where(both, wA * (m1 - m2) * inv_a + wB * (1.0 - q1 * inv_a) - 2.0, 0.0)
    da = da + np.where(
        both, wA * (m1 * dq1_da + m2 * dq2_da) - wB * (q1 * dq1_da + inv_a), 0.0
    )
    # site 1 exceeds, site 2 censored: log Phi(q1) - 2 l1
    d1 = d1 + np.where(only1, -m1 * inv_a - 2.0, 0.0)
    d2 = d2 + np.where(only1, m1 * inv_a, 0.0)
    da = da + np.where(only1, m1 * dq1_da, 0.0)
    # site 2 exceeds, site 1 censored
    d1 = d1 + np.where(only2, m2 * inv_a, 0.0)
    d2 = d2 + np.where(only2, -m2 * inv_a - 2.0, 0.0)
    da = da + np.where(only2, m2 * dq2_da, 0.0)
    return value, d1, d2, da


def censored_pair_loglik(y1, y2, g1: GevParams, g2: GevParams, u1, u2,
                         dep: DependenceParams, h):
    """Log-likelihood contribution of one observed pair under censoring.

    Observations at or below their threshold are censored. Raises
    :class:`SupportError` if an exceeding observation or a threshold lies
    outside its GEV support.
    """
    alpha, phi = natural_scale(dep)
    a = float(pair_scale(h, alpha, phi))
    e1 = bool(y1 > u1)
    e2 = bool(y2 > u2)
    terms = []
    for y, u, g, e, name in ((y1, u1, g1, e1, "site 1"), (y2, u2, g2, e2, "site 2")):
        v = y if e else u
        ft = log_frechet_terms(np.asarray(v, dtype=float), g.mu, np.log(g.sigma), g.xi)
        if abs(g.xi) >= XI_TOL and not ft["t"] > 0:
            what = "observation" if e else "threshold"
            raise SupportError(f"{name} {what} {v!r} lies outside the GEV support",
                               site=name, value=float(v))
        terms.append(ft)
    value = censored_pair_terms(terms[0]["ell"], terms[1]["ell"], a, e1, e2,
                                derivatives=False)
    value = float(value)
    if e1:
        value += float(terms[0]["log_jac"])
    if e2:
        value += float(terms[1]["log_jac"])
    return value
