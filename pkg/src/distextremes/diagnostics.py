"""Goodness of fit and return levels from fitted GEV margins."""
from __future__ import annotations

import numpy as np
from scipy import optimize, stats

from .errors import ConfigError, NumericalError
from .extremes_core import frechet_to_gev, gev_cdf, log_frechet_terms


def margins_from_theta(theta, z1, z2, z3, slices):
    """``(mu, sigma, xi)`` from a stationary parameter vector and its designs.

    Designs may be ``(d, q)`` or ``(n, d, q)``; outputs broadcast accordingly.
    """
    theta = np.asarray(theta, dtype=float)
    s1, s2, s3 = slices
    return z1 @ theta[s1], np.exp(z2 @ theta[s2]), z3 @ theta[s3]


def pit_values(y, mu, sigma, xi):
    """Probability integral transform of each observation.

    Returns ``(u, flag)``: ``flag`` is -1 for observations below the fitted
    lower support bound (``u = 0``), +1 above the upper bound (``u = 1``) and
    0 otherwise. Missing observations give NaN.
    """
    y = np.asarray(y, dtype=float)
    mu, sigma, xi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, xi)))
    mu, sigma, xi = (np.broadcast_to(v, y.shape) for v in (mu, sigma, xi))
    with np.errstate(invalid="ignore", divide="ignore"):
        t = 1.0 + xi * (y - mu) / sigma
    outside = (np.abs(xi) >= 1e-8) & ~(t > 0) & np.isfinite(y)
    u = np.where(np.isfinite(y), gev_cdf(np.where(np.isfinite(y), y, mu), mu, sigma, xi), np.nan)
    flag = np.zeros(y.shape, dtype=np.int8)
    flag[outside & (xi > 0)] = -1
    flag[outside & (xi < 0)] = 1
    return u, flag


def uniformity_test(u):
    """Kolmogorov-Smirnov test of all finite PIT values pooled.

    Pooling assumes independent values; with spatially dependent sites the
    p-value is too small. :func:`site_uniformity` is valid under dependence.
    """
    u = np.asarray(u, dtype=float)
    return stats.kstest(u[np.isfinite(u)], "uniform")


def site_uniformity(u):
    """Per-site KS p-values over replicates and their Bonferroni combination.

    Replicates are independent, so each column gives a valid test whatever
    the spatial dependence; the combined p-value is ``min(1, d * min_j p_j)``.
    """
    u = np.asarray(u, dtype=float)
    pv = np.array([stats.kstest(col[np.isfinite(col)], "uniform").pvalue
                   if np.isfinite(col).sum() else np.nan for col in u.T])
    m = np.isfinite(pv).sum()
    return pv, float(min(1.0, m * np.nanmin(pv))) if m else float("nan")


def _month_quantile(p, mu, sigma, xi):
    return frechet_to_gev(-1.0 / np.log(p), mu, sigma, xi)


def annual_return_level(mu, sigma, xi, r: float, months_per_year: int = 12) -> float:
    """Solve ``prod_m F_m(y) = 1 - 1/r`` over the months of one year.

    ``mu``, ``sigma``, ``xi`` are scalars (identical months) or arrays with one
    entry per month.
    """
    if not r > 1:
        raise ConfigError("the return period must exceed 1")
    mu, sigma, xi = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float))
                                          for v in (mu, sigma, xi)))
    if mu.size == 1:
        mu, sigma, xi = (np.repeat(v, months_per_year) for v in (mu, sigma, xi))
    m = mu.size
    target = 1.0 - 1.0 / r

    def f(y):
        with np.errstate(divide="ignore"):
            return float(np.exp(np.sum(np.log(gev_cdf(y, mu, sigma, xi))))) - target

    # the root lies between the smallest and largest single-month quantile
    qs = _month_quantile(target ** (1.0 / m), mu, sigma, xi)
    lo, hi = float(np.min(qs)), float(np.max(qs))
    if hi - lo <= 1e-14 * max(1.0, abs(hi)):
        return hi
    width = hi - lo
    for _ in range(60):
        if f(lo) <= 0 <= f(hi):
            break
        width *= 2.0
        lo, hi = lo - width, hi + width
    else:
        raise NumericalError("could not bracket the return level")
    return float(optimize.brentq(f, lo, hi, xtol=1e-13 * max(1.0, abs(hi)), rtol=1e-15,
                                 maxiter=500))


def return_level(margins_fn, theta, cov, r: float, months_per_year: int = 12):
    """Return level and delta-method standard error.

    ``margins_fn(theta)`` maps the parameter vector to per-month
    ``(mu, sigma, xi)``. The gradient of the level with respect to ``theta``
    is obtained by central differences of the root; coordinates that leave
    the margins unchanged are skipped.
    """
    theta = np.asarray(theta, dtype=float)
    base = margins_fn(theta)
    level = annual_return_level(*base, r, months_per_year)
    if cov is None:
        return level, float("nan")
    grad = np.zeros(theta.size)
    for j in range(theta.size):
        h = 1e-5 * (1.0 + abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        m_up = margins_fn(up)
        if all(np.array_equal(a, b) for a, b in zip(m_up, base)):
            continue
        grad[j] = (annual_return_level(*m_up, r, months_per_year)
                   - annual_return_level(*margins_fn(dn), r, months_per_year)) / (2 * h)
    var = float(grad @ np.asarray(cov, dtype=float) @ grad)
    return level, float(np.sqrt(max(var, 0.0)))


def return_level_linear(D1, D2, D3, theta, cov, r: float):
    """Return level for margins linear in ``theta``, with an analytic gradient.

    Row ``m`` of ``D1``, ``D2``, ``D3`` gives month ``m``'s location, log-scale
    and shape as ``D @ theta``. The gradient follows from implicit
    differentiation of ``sum_m log F_m(y) = log(1 - 1/r)``.
    """
    theta = np.asarray(theta, dtype=float)
    D1, D2, D3 = (np.atleast_2d(np.asarray(D, dtype=float)) for D in (D1, D2, D3))
    mu, ls, xi = D1 @ theta, D2 @ theta, D3 @ theta
    level = annual_return_level(mu, np.exp(ls), xi, r, months_per_year=mu.size)
    if cov is None:
        return level, float("nan")
    tm = log_frechet_terms(level, mu, ls, xi)
    inside = tm["t"] > 0
    with np.errstate(over="ignore"):
        w = np.where(inside, np.exp(-np.where(inside, tm["ell"], 0.0)), 0.0)
    coef = [np.where(inside, w * tm[key], 0.0) for key in ("d_mu", "d_ls", "d_xi")]
    g_y = -float(np.sum(coef[0]))
    if not g_y != 0:
        raise NumericalError("return level sits where the annual distribution is flat")
    g_theta = coef[0] @ D1 + coef[1] @ D2 + coef[2] @ D3
    grad = -g_theta / g_y
    var = float(grad @ np.asarray(cov, dtype=float) @ grad)
    return level, float(np.sqrt(max(var, 0.0)))
