"""Censored pairwise composite likelihood inside one spatial block.

The block parameter vector is laid out as

    theta = (omega, zeta, c1, c2, c3)

where ``c1``, ``c2``, ``c3`` are the coefficients of the location, log-scale and
shape designs. In the stationary model they are the regression coefficients
``beta1..beta3``; in the varying-coefficient model ``c1`` and ``c2`` hold the
radial-basis coefficients of the block. Designs are arrays of shape ``(d, q)``
(time invariant) or ``(n, d, q)``.

All pairs of distinct sites inside the block enter the likelihood. The score is
the exact gradient of the implemented log-likelihood, assembled analytically:
pair-level partials in ``(log x1, log x2, a)`` are accumulated per site and then
pushed through the marginal transform and the designs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError, SupportError
from ._kernels import pair_block
from .extremes_core import XI_BOUNDS, XI_TOL, log_frechet_terms

logger = logging.getLogger(__name__)

OMEGA_BOUNDS = (-8.0, 8.0)
ZETA_BOUNDS = (-10.0, 12.0)


def _as_design(z, n, d, name):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim == 2 and z.shape[0] == d:
        return z
    if z.ndim == 3 and z.shape[:2] == (n, d):
        return z
    raise ConfigError(f"design {name} has shape {z.shape}; expected ({d}, q) or ({n}, {d}, q)")


def intercept_design(d):
    return np.ones((d, 1))


@dataclass
class BlockData:
    """Observations and designs of one block.

    ``y`` may contain NaN for missing observations; pairs involving a missing
    value are skipped. ``u`` holds per-site thresholds on the data scale.
    """

    coords: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z1: np.ndarray = None
    z2: np.ndarray = None
    z3: np.ndarray = None
    block_id: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2:
            raise DataError("observations must be a matrix (n, d)")
        n, d = self.y.shape
        if d < 2:
            raise ConfigError(f"block {self.block_id} has fewer than two sites")
        if self.coords.shape != (d, 2):
            raise ConfigError("coords must have shape (d, 2)")
        self.u = np.broadcast_to(np.asarray(self.u, dtype=float), (d,)).copy()
        if not np.all(np.isfinite(self.u)):
            raise DataError(f"block {self.block_id}: thresholds must be finite")
        self.z1 = _as_design(intercept_design(d) if self.z1 is None else self.z1, n, d, "z1")
        self.z2 = _as_design(intercept_design(d) if self.z2 is None else self.z2, n, d, "z2")
        self.z3 = _as_design(intercept_design(d) if self.z3 is None else self.z3, n, d, "z3")

        self.finite = np.isfinite(self.y)
        with np.errstate(invalid="ignore"):
            self.exceed = self.finite & (self.y > self.u)
        self.i1, self.i2 = np.triu_indices(d, 1)
        self.h = cdist(self.coords, self.coords)[self.i1, self.i2]
        if np.any(self.h <= 0):
            raise ConfigError(f"block {self.block_id} contains duplicated sites")
        q = [z.shape[-1] for z in (self.z1, self.z2, self.z3)]
        self.slices = (slice(2, 2 + q[0]), slice(2 + q[0], 2 + q[0] + q[1]),
                       slice(2 + q[0] + q[1], 2 + sum(q)))
        self.p = 2 + sum(q)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.y.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.i1.size


def _linear(z, c, rows):
    if z.ndim == 2:
        return z @ c
    return z[rows] @ c


def _project(z, g, rows):
    if z.ndim == 2:
        return g @ z
    return np.einsum("nd,ndq->nq", g, z[rows])


def _dependence(theta, h):
    omega, zeta = theta[0], theta[1]
    alpha = 2.0 * special.expit(omega)
    lg = np.log(h) - zeta
    a = np.sqrt(2.0) * np.exp(0.5 * alpha * lg)
    da_domega = 0.5 * a * lg * alpha * (1.0 - 0.5 * alpha)
    da_dzeta = -0.5 * a * alpha
    return a, da_domega, da_dzeta


def evaluate_block(theta, data: BlockData, kernels: bool = True):
    """Per-replicate log-likelihood and score kernels.

    Returns ``(ll, psi)`` with ``ll`` of shape ``(n,)`` (sum over pairs for each
    replicate) and ``psi`` of shape ``(n, p)``, or ``None`` when ``theta`` puts
    an exceeding observation or a threshold outside the GEV support. With
    ``kernels=False`` the second element is ``None``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.p,):
        raise ConfigError(f"theta has length {theta.size}; block needs {data.p}")
    if not np.all(np.isfinite(theta)):
        return None
    s1, s2, s3 = data.slices
    a, da_dw, da_dz = _dependence(theta, data.h)
    n, d = data.y.shape
    fin = data.finite
    exc = data.exceed
    v = np.where(exc, data.y, data.u)
    mu = _linear(data.z1, theta[s1], slice(None))
    ls = _linear(data.z2, theta[s2], slice(None))
    xi = _linear(data.z3, theta[s3], slice(None))
    ft = log_frechet_terms(v, mu, ls, xi)
    t = np.broadcast_to(ft["t"], v.shape)
    big_xi = np.broadcast_to(np.abs(xi) >= XI_TOL, v.shape)
    if np.any(fin & big_xi & ~(t > 0)):
        return None
    ell = np.where(fin, ft["ell"], 0.0)
    ll, G, s_w, s_z = pair_block(ell, exc, fin, data.i1, data.i2, a, da_dw, da_dz, kernels)
    # each exceeding site's log-Jacobian appears once per valid partner
    deg = (fin.sum(axis=1, keepdims=True) - 1.0) * exc
    log_jac = np.where(exc, np.broadcast_to(ft["log_jac"], v.shape), 0.0)
    ll = ll + (deg * log_jac).sum(axis=1)
    psi = None
    if kernels:
        def site_grad(dl, dj):
            return np.where(fin, G * dl + deg * dj, 0.0)

        psi = np.empty((n, data.p))
        psi[:, 0] = s_w
        psi[:, 1] = s_z
        psi[:, s1] = _project(data.z1, site_grad(ft["d_mu"], ft["dj_mu"]), slice(None))
        psi[:, s2] = _project(data.z2, site_grad(ft["d_ls"], ft["dj_ls"]), slice(None))
        psi[:, s3] = _project(data.z3, site_grad(ft["d_xi"], ft["dj_xi"]), slice(None))
    if not np.all(np.isfinite(ll)) or (kernels and not np.all(np.isfinite(psi))):
        return None
    return ll, psi


def block_ccl(theta, data: BlockData) -> float:
    """Block log censored composite likelihood (average over replicates).

    Returns ``-inf`` if ``theta`` violates the GEV support.
    """
    res = evaluate_block(theta, data, kernels=False)
    if res is None:
        return -np.inf
    return float(np.mean(res[0]))


def block_kernels(theta, data: BlockData) -> np.ndarray:
    """Per-replicate score kernels ``psi_i`` of shape ``(n, p)``."""
    res = evaluate_block(theta, data)
    if res is None:
        raise SupportError(f"block {data.block_id}: theta violates the GEV support")
    return res[1]


def block_score(theta, data: BlockData) -> np.ndarray:
    """Gradient of :func:`block_ccl`; equals the column means of the kernels."""
    return block_kernels(theta, data).mean(axis=0)


def block_sensitivity(theta, data: BlockData, rel_step: float | None = None) -> np.ndarray:
    """Jacobian of the block score (Hessian of the CCL) by central differences.

    The analytic score is differenced with step ``eps**(1/3) * (1 + |theta_j|)``
    and the result symmetrized.
    """
    theta = np.asarray(theta, dtype=float)
    rel = np.finfo(float).eps ** (1.0 / 3.0) if rel_step is None else rel_step
    p = theta.size
    out = np.empty((p, p))
    base = None
    for j in range(p):
        h = rel * (1.0 + abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        r_up = evaluate_block(up, data)
        r_dn = evaluate_block(dn, data)
        if r_up is not None and r_dn is not None:
            out[:, j] = (r_up[1].mean(0) - r_dn[1].mean(0)) / (2.0 * h)
            continue
        if base is None:
            base = block_score(theta, data)
        if r_up is not None:
            out[:, j] = (r_up[1].mean(0) - base) / h
        elif r_dn is not None:
            out[:, j] = (base - r_dn[1].mean(0)) / h
        else:
            raise SupportError(f"block {data.block_id}: cannot difference the score at theta")
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# starting values


def gev_pwm(sample) -> tuple[float, float, float]:
    """GEV ``(mu, sigma, xi)`` by probability-weighted moments (Hosking 1985)."""
    x = np.sort(np.asarray(sample, dtype=float)[np.isfinite(sample)])
    m = x.size
    if m < 3:
        raise DataError("need at least three observations for a PWM fit")
    i = np.arange(m)
    b0 = x.mean()
    b1 = np.sum(i / (m - 1) * x) / m
    b2 = np.sum(i * (i - 1) / ((m - 1) * (m - 2)) * x) / m
    denom = 3.0 * b2 - b0
    if not abs(denom) > 0 or not (2.0 * b1 - b0) > 0:
        sd = max(float(np.std(x)), 1e-8)
        return float(b0 - 0.45 * sd), 0.78 * sd, 0.1
    c = (2.0 * b1 - b0) / denom - np.log(2.0) / np.log(3.0)
    k = 7.8590 * c + 2.9554 * c * c
    k = float(np.clip(k, -0.9, 0.45))
    if abs(k) < 1e-6:
        sigma = (2.0 * b1 - b0) / np.log(2.0)
        mu = b0 - 0.5772156649 * sigma
    else:
        g = special.gamma(1.0 + k)
        sigma = (2.0 * b1 - b0) * k / (g * (1.0 - 2.0 ** (-k)))
        mu = b0 + sigma * (g - 1.0) / k
    return float(mu), float(sigma), float(-k)


def extremal_coefficient_fit(coords, y) -> tuple[float, float]:
    """``(alpha, phi)`` from madogram extremal coefficients regressed on distance."""
    y = np.asarray(y, dtype=float)
    d = y.shape[1]
    ranks = np.full(y.shape, np.nan)
    for j in range(d):
        ok = np.isfinite(y[:, j])
        ranks[ok, j] = stats.rankdata(y[ok, j]) / (ok.sum() + 1.0)
    i1, i2 = np.triu_indices(d, 1)
    with np.errstate(invalid="ignore"):
        nu = 0.5 * np.nanmean(np.abs(ranks[:, i1] - ranks[:, i2]), axis=0)
        ext = (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu)
    h = cdist(coords, coords)[i1, i2]
    ok = np.isfinite(ext) & (ext > 1.0 + 1e-6) & (ext < 2.0 - 1e-6) & (h > 0)
    if ok.sum() < 3 or np.ptp(np.log(h[ok])) <= 0:
        return 1.0, float(np.median(h))
    a = 2.0 * stats.norm.ppf(ext[ok] / 2.0)
    lgam = np.log(0.5 * a * a)
    slope, intercept = np.polyfit(np.log(h[ok]), lgam, 1)
    alpha = float(np.clip(slope, 0.1, 1.9))
    log_phi = float(np.clip(-intercept / slope if slope > 0 else np.log(np.median(h)),
                            ZETA_BOUNDS[0] + 1, ZETA_BOUNDS[1] - 1))
    return alpha, float(np.exp(log_phi))


def _site_design(z):
    return z if z.ndim == 2 else z.mean(axis=0)


def _intercept_column(z):
    zs = _site_design(z)
    cols = np.flatnonzero(np.all(np.isclose(zs, 1.0), axis=0))
    return int(cols[0]) if cols.size else None


def initial_theta(data: BlockData) -> np.ndarray:
    """Starting values from per-site PWM fits and extremal coefficients.

    Site-level GEV estimates are pooled onto the designs by least squares. If
    the result violates the support, the scale is inflated until it does not.
    """
    fits = np.array([gev_pwm(data.y[:, j]) for j in range(data.d)])
    mu_s, sig_s, xi_s = fits.T
    xi_s = np.clip(xi_s, XI_BOUNDS[0] + 0.05, XI_BOUNDS[1] - 0.05)
    theta = np.zeros(data.p)
    alpha, phi = extremal_coefficient_fit(data.coords, data.y)
    theta[0] = np.log(alpha / (2.0 - alpha))
    theta[1] = np.log(phi)
    s1, s2, s3 = data.slices
    theta[s1] = np.linalg.lstsq(_site_design(data.z1), mu_s, rcond=None)[0]
    theta[s2] = np.linalg.lstsq(_site_design(data.z2), np.log(sig_s), rcond=None)[0]
    theta[s3] = np.linalg.lstsq(_site_design(data.z3), xi_s, rcond=None)[0]
    if np.isfinite(block_ccl(theta, data)):
        return theta
    i2 = _intercept_column(data.z2)
    i3 = _intercept_column(data.z3)
    if i3 is not None:
        theta[s3] = 0.0
        theta[s3.start + i3] = 0.1
    for _ in range(40):
        if np.isfinite(block_ccl(theta, data)):
            return theta
        if i2 is None:
            break
        theta[s2.start + i2] += np.log(1.5)
    raise SupportError(
        f"block {data.block_id}: could not find starting values inside the GEV support"
    )


# ---------------------------------------------------------------------------
# maximization


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings.

    ``gtol`` and ``converge_tol`` refer to the gradient of the CCL divided by
    the number of pairs in the block.
    """

    gtol: float = 1e-7
    converge_tol: float = 1e-4
    maxiter: int = 2000
    simplex_fev: int = 0
    restarts: int = 2


@dataclass
class BlockFitResult:
    block_id: int
    theta: np.ndarray
    converged: bool
    ccl: float
    grad_norm: float
    n_iter: int
    n_eval: int
    message: str = ""
    psi: np.ndarray | None = field(default=None, repr=False)
    sensitivity: np.ndarray | None = field(default=None, repr=False)


def parameter_bounds(data: BlockData):
    bounds = [OMEGA_BOUNDS, ZETA_BOUNDS] + [(None, None)] * (data.p - 2)
    s3 = data.slices[2]
    z3 = _site_design(data.z3)
    if z3.shape[1] == 1 and np.allclose(z3, 1.0):
        bounds[s3.start] = XI_BOUNDS
    return bounds


def _projected_grad(theta, grad, bounds):
    g = np.array(grad, dtype=float)
    for j, (lo, hi) in enumerate(bounds):
        if lo is not None and theta[j] <= lo + 1e-12 and g[j] > 0:
            g[j] = 0.0
        if hi is not None and theta[j] >= hi - 1e-12 and g[j] < 0:
            g[j] = 0.0
    return g


def _preconditioner(data: BlockData) -> np.ndarray:
    """Linear map ``theta = T @ gamma`` that orthonormalizes each design.

    Radial-basis designs are strongly collinear on small blocks; optimizing in
    QR coordinates of the site-level design removes most of that
    ill-conditioning without changing the likelihood.
    """
    T = np.eye(data.p)
    for z, sl in zip((data.z1, data.z2, data.z3), data.slices):
        zs = _site_design(z)
        if zs.shape[1] < 2:
            continue
        R = np.linalg.qr(zs / np.sqrt(zs.shape[0]), mode="r")
        T[sl, sl] = np.linalg.inv(R)
    return T


def fit_block(data: BlockData, init=None, opts: FitOptions | None = None) -> BlockFitResult:
    """Maximize the block CCL.

    An optional coarse Nelder-Mead pass is followed by L-BFGS-B on the
    pair-averaged negative CCL, run in orthonormalized design coordinates. The
    ``converged`` flag requires the projected gradient with respect to the
    original parameters to be below ``opts.converge_tol``; it is never set
    otherwise.
    """
    opts = opts or FitOptions()
    theta = initial_theta(data) if init is None else np.array(init, dtype=float)
    if not np.isfinite(block_ccl(theta, data)):
        raise SupportError(f"block {data.block_id}: initial value violates the GEV support")
    scale = 1.0 / data.n_pairs
    bounds = parameter_bounds(data)
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    theta = np.clip(theta, lo, hi)
    # bounded coordinates are never mixed by the preconditioner
    T = _preconditioner(data)
    Tinv = np.linalg.inv(T)
    counter = {"n": 0}
    last = {"f": None}

    def fun_theta(th):
        counter["n"] += 1
        res = evaluate_block(th, data)
        if res is None:
            return None
        return -float(np.mean(res[0])) * scale, -res[1].mean(axis=0) * scale

    def fun(gam):
        out = fun_theta(T @ gam)
        if out is None:
            # outside the support: report a worse value than anything seen so
            # far so the line search backs off
            f_bad = (abs(last["f"]) + 1.0) * 10.0 if last["f"] is not None else 1e10
            return f_bad, np.zeros_like(gam)
        last["f"] = out[0]
        return out[0], T.T @ out[1]

    if opts.simplex_fev > 0:
        nm = optimize.minimize(lambda gm: fun(np.clip(T @ gm, lo, hi) @ Tinv.T)[0],
                               Tinv @ theta, method="Nelder-Mead",
                               options={"maxfev": opts.simplex_fev, "xatol": 1e-6,
                                        "fatol": 1e-10})
        cand = np.clip(T @ nm.x, lo, hi)
        if np.isfinite(block_ccl(cand, data)):
            theta = cand

    n_iter = 0
    message = ""
    for _ in range(1 + opts.restarts):
        res = optimize.minimize(fun, Tinv @ theta, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": opts.maxiter, "gtol": opts.gtol,
                                         "ftol": 1e-15, "maxcor": 20})
        n_iter += int(res.nit)
        message = str(res.message)
        cand = np.clip(T @ res.x, lo, hi)
        if np.isfinite(block_ccl(cand, data)):
            theta = cand
        out = fun_theta(theta)
        if np.max(np.abs(_projected_grad(theta, out[1], bounds))) <= opts.converge_tol:
            break
    f, g = fun_theta(theta)
    grad_norm = float(np.max(np.abs(_projected_grad(theta, g, bounds))))
    converged = bool(np.isfinite(f) and grad_norm <= opts.converge_tol)
    if not converged:
        logger.warning("block %s did not converge: %s (|grad| = %.3g)",
                       data.block_id, message, grad_norm)
    return BlockFitResult(
        block_id=data.block_id,
        theta=np.asarray(theta, dtype=float),
        converged=converged,
        ccl=-f / scale,
        grad_norm=grad_norm,
        n_iter=n_iter,
        n_eval=counter["n"],
        message=message,
    )
