"""Spatially varying location and scale coefficients.

Within block ``k`` the coefficient surfaces of the location and log-scale
models are expanded in a local basis

    phi(s) = [1, s1, s2, C(|s - kappa_1|), ..., C(|s - kappa_J|)],
    C(h) = exp(-scale * h**2),

with knots ``kappa`` chosen inside the block. Per-replicate covariates
``z_t(s)`` multiply the basis (column ``t * J + j`` holds ``z_t(s) phi_j(s)``).
Each block then estimates ``(omega, zeta, eta_1k, eta_2k, beta3)`` with the
ordinary block likelihood. The global vector stacks

    (omega, zeta, eta_11, eta_21, eta_12, eta_22, ..., eta_1K, eta_2K, beta3)

and the meta-step adds a ridge penalty on the ``eta`` coordinates, with the
penalty levels chosen by generalized cross-validation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, NumericalError
from .gmm_integrate import (
    Combination, StackedScores, block_weights, combine, sample_covariance, sandwich_from,
)
from .local_fit import BlockData, FitOptions, fit_block

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 0.05
MAX_KNOTS = 10


def default_knot_count(d_k: int) -> int:
    """``ceil(d_k / 2.5)`` knots, at most 10 (10 knots for 25 sites)."""
    return int(min(MAX_KNOTS, math.ceil(d_k / 2.5)))


def select_knots(block_sites, count: int) -> np.ndarray:
    """Greedy farthest-point knots, seeded at the site nearest the centroid."""
    pts = np.asarray(block_sites, dtype=float)
    if count < 0 or count > pts.shape[0]:
        raise ConfigError(f"cannot place {count} knots among {pts.shape[0]} sites")
    if count == 0:
        return np.zeros((0, 2))
    centre = pts.mean(axis=0)
    chosen = [int(np.argmin(np.sum((pts - centre) ** 2, axis=1)))]
    nearest = np.sqrt(np.sum((pts - pts[chosen[0]]) ** 2, axis=1))
    for _ in range(count - 1):
        nxt = int(np.argmax(nearest))  # first index on ties
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.sqrt(np.sum((pts - pts[nxt]) ** 2, axis=1)))
    return pts[chosen].copy()


def basis_matrix(block_sites, knots, scale: float = DEFAULT_SCALE,
                 linear: bool = True) -> np.ndarray:
    """``[1, s1, s2, C(|s - kappa_j|)...]`` evaluated at the block sites."""
    pts = np.asarray(block_sites, dtype=float)
    knots = np.asarray(knots, dtype=float).reshape(-1, 2)
    cols = [np.ones((pts.shape[0], 1))]
    if linear:
        cols.append(pts)
    if knots.shape[0]:
        cols.append(np.exp(-scale * cdist(pts, knots) ** 2))
    B = np.hstack(cols)
    rank = np.linalg.matrix_rank(B)
    if rank < B.shape[1]:
        raise ConfigError(
            f"basis has rank {rank} with {B.shape[1]} columns on {pts.shape[0]} sites; "
            "use fewer knots"
        )
    return B


@dataclass(frozen=True)
class BasisSpec:
    """Per-block knot sets and the shared kernel settings."""

    knots: tuple
    scale: float = DEFAULT_SCALE
    linear: bool = True

    @classmethod
    def build(cls, sites, partition, count=None, scale=DEFAULT_SCALE, linear=True):
        sites = np.asarray(sites, dtype=float)
        knots = []
        for idx in partition.blocks:
            c = default_knot_count(idx.size) if count is None else min(int(count), idx.size)
            knots.append(select_knots(sites[idx], c))
        return cls(tuple(knots), float(scale), bool(linear))

    @classmethod
    def intercept_only(cls, K: int):
        return cls(tuple(np.zeros((0, 2)) for _ in range(K)), DEFAULT_SCALE, False)

    @property
    def K(self) -> int:
        return len(self.knots)

    def n_basis(self, k: int) -> int:
        return 1 + 2 * self.linear + len(self.knots[k])

    def matrix(self, k: int, block_sites) -> np.ndarray:
        return basis_matrix(block_sites, self.knots[k], self.scale, self.linear)


def expand_design(B, covariates=None) -> np.ndarray:
    """Multiply a ``(d, J)`` basis by covariates ``(d, T)`` or ``(n, d, T)``.

    Without covariates the basis itself is returned.
    """
    if covariates is None:
        return B
    z = np.asarray(covariates, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim == 2:
        return (z[:, :, None] * B[:, None, :]).reshape(B.shape[0], -1)
    n, d, T = z.shape
    return (z[:, :, :, None] * B[None, :, None, :]).reshape(n, d, T * B.shape[1])


def _n_cov(covariates) -> int:
    if covariates is None:
        return 1
    z = np.asarray(covariates)
    return 1 if z.ndim == 1 else z.shape[-1]


@dataclass(frozen=True)
class SvcLayout:
    """Positions of block coefficients inside the global parameter vector."""

    p1: tuple
    p2: tuple
    q3: int

    @property
    def K(self) -> int:
        return len(self.p1)

    @property
    def p_global(self) -> int:
        return 2 + sum(self.p1) + sum(self.p2) + self.q3

    def eta_offset(self, k: int) -> int:
        return 2 + sum(self.p1[:k]) + sum(self.p2[:k])

    def eta1(self, k: int) -> np.ndarray:
        o = self.eta_offset(k)
        return np.arange(o, o + self.p1[k])

    def eta2(self, k: int) -> np.ndarray:
        o = self.eta_offset(k) + self.p1[k]
        return np.arange(o, o + self.p2[k])

    @property
    def beta3(self) -> np.ndarray:
        return np.arange(self.p_global - self.q3, self.p_global)

    def index_map(self, k: int) -> np.ndarray:
        return np.concatenate([[0, 1], self.eta1(k), self.eta2(k), self.beta3]).astype(int)

    def index_maps(self) -> list:
        return [self.index_map(k) for k in range(self.K)]

    def penalty(self, lam1: float, lam2: float) -> np.ndarray:
        if lam1 < 0 or lam2 < 0:
            raise ConfigError("penalties must be nonnegative")
        diag = np.zeros(self.p_global)
        for k in range(self.K):
            diag[self.eta1(k)] = lam1
            diag[self.eta2(k)] = lam2
        return diag

    def block_theta(self, theta, k: int) -> np.ndarray:
        return np.asarray(theta)[self.index_map(k)]

    def names(self) -> list:
        out = ["omega", "zeta"]
        for k in range(self.K):
            out += [f"eta1_{k}_{j}" for j in range(self.p1[k])]
            out += [f"eta2_{k}_{j}" for j in range(self.p2[k])]
        return out + [f"beta3_{j}" for j in range(self.q3)]


def layout_for(spec: BasisSpec, cov1=None, cov2=None, q3: int = 1) -> SvcLayout:
    t1, t2 = _n_cov(cov1), _n_cov(cov2)
    return SvcLayout(tuple(t1 * spec.n_basis(k) for k in range(spec.K)),
                     tuple(t2 * spec.n_basis(k) for k in range(spec.K)), int(q3))


def svc_block_data(coords, y, u, B, z3=None, cov1=None, cov2=None, block_id=0) -> BlockData:
    """Block data whose location/log-scale designs are the expanded basis."""
    return BlockData(coords, y, u, z1=expand_design(B, cov1), z2=expand_design(B, cov2),
                     z3=z3, block_id=block_id)


def fit_block_svc(data: BlockData, init=None, opts: FitOptions | None = None):
    """Block MCCLE of ``(omega, zeta, eta_1k, eta_2k, beta3)``."""
    return fit_block(data, init=init, opts=opts)


def pad_sensitivity(I_k, cols, p_global: int) -> np.ndarray:
    """Place the columns of ``I_k`` at global positions ``cols``; zeros elsewhere."""
    I_k = np.asarray(I_k, dtype=float)
    cols = np.asarray(cols, dtype=int)
    if I_k.ndim != 2 or I_k.shape[1] != cols.size:
        raise IndexError(f"sensitivity has {I_k.shape[1]} columns; layout maps {cols.size}")
    if cols.size and (cols.min() < 0 or cols.max() >= p_global):
        raise IndexError("layout index outside the global parameter vector")
    out = np.zeros((I_k.shape[0], p_global))
    out[:, cols] = I_k
    return out


def meta_estimate_svc(thetas, sens, weights, layout: SvcLayout,
                      lam1: float = 0.0, lam2: float = 0.0) -> Combination:
    """Penalized meta-estimator over the global SVC parameter vector."""
    try:
        return combine(thetas, sens, weights, layout.index_maps(), layout.p_global,
                       layout.penalty(lam1, lam2))
    except NumericalError as exc:
        raise type(exc)(f"{exc}; a larger penalty may help") from exc


def svc_sandwich(comb: Combination, C, offsets, n: int) -> np.ndarray:
    """``n^-1 H^-1 G H^-T`` with the penalized ``H``."""
    return sandwich_from(comb, C, offsets, n)


def effective_dof(comb: Combination) -> float:
    """``trace[H^-1 sum_k Pi~_k]`` where ``H`` includes the penalty."""
    pi_sum = sum(It.T @ W @ It for It, W in zip(comb.padded, comb.weights))
    return float(np.trace(np.linalg.solve(comb.H, pi_sum)))


def gcv(psis_at_vm, comb: Combination, n: int) -> float:
    """Generalized cross-validation statistic for one penalty pair.

    ``psis_at_vm`` are the block kernels evaluated at the block slices of the
    penalized estimate; the score covariance is re-estimated from them.
    """
    stacked = StackedScores.from_blocks(psis_at_vm)
    C = sample_covariance(stacked)
    W = block_weights(C, stacked.offsets)
    num = sum(float(s @ Wk @ s) for s, Wk in zip(stacked.scores(), W)) / n
    shrink = 1.0 - effective_dof(comb) / n
    if shrink <= 0:
        raise NumericalError("effective degrees of freedom reach the number of replicates")
    return num / shrink ** 2


@dataclass
class GcvResult:
    lam1: float
    lam2: float
    table: list
    comb: Combination


def gcv_search(thetas, sens, weights, layout: SvcLayout, n: int, grid1, grid2,
               evaluate_kernels) -> GcvResult:
    """Grid search of the penalty pair.

    ``evaluate_kernels(theta_global)`` must return the list of block kernel
    matrices at the block slices of ``theta_global``. Penalty pairs whose
    statistic cannot be evaluated (singular normal matrix, support violation
    at the penalized estimate) are skipped with a warning.
    """
    table = []
    best = None
    for l1 in grid1:
        for l2 in grid2:
            if len(grid1) * len(grid2) == 1:
                comb = meta_estimate_svc(thetas, sens, weights, layout, l1, l2)
                return GcvResult(float(l1), float(l2), [], comb)
            try:
                comb = meta_estimate_svc(thetas, sens, weights, layout, l1, l2)
                value = gcv(evaluate_kernels(comb.theta), comb, n)
            except (NumericalError, ArithmeticError, ValueError) as exc:
                logger.warning("GCV rejected lambda=(%g, %g): %s", l1, l2, exc)
                value = np.inf
            table.append((float(l1), float(l2), float(value)))
            if np.isfinite(value) and (best is None or value < best[0]):
                best = (value, float(l1), float(l2), comb)
    if best is None:
        raise NumericalError("GCV could not be evaluated at any penalty pair")
    return GcvResult(best[1], best[2], table, best[3])


@dataclass
class FieldEstimates:
    """Per-site coefficient surfaces and pointwise standard errors.

    ``b1``/``b2`` have shape ``(d, T)``: one column per covariate. With the
    default constant covariate, ``mu = b1[:, 0]`` and ``sigma = exp(b2[:, 0])``.
    """

    b1: np.ndarray
    b1_se: np.ndarray
    b2: np.ndarray
    b2_se: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return self.b1[:, 0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.b2[:, 0])

    @property
    def sigma_se(self) -> np.ndarray:
        return self.sigma * self.b2_se[:, 0]


def reconstruct_fields(theta, cov, spec: BasisSpec, layout: SvcLayout, sites,
                       partition) -> FieldEstimates:
    """Evaluate the fitted surfaces at every site with delta-method SEs."""
    sites = np.asarray(sites, dtype=float)
    theta = np.asarray(theta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = sites.shape[0]
    if partition.assignment.size != d:
        raise ConfigError("every site must belong to a block")
    T1 = layout.p1[0] // spec.n_basis(0)
    T2 = layout.p2[0] // spec.n_basis(0)
    out = {key: np.empty((d, T)) for key, T in
           (("b1", T1), ("b1_se", T1), ("b2", T2), ("b2_se", T2))}
    for k, idx in enumerate(partition.blocks):
        B = spec.matrix(k, sites[idx])
        J = B.shape[1]
        for name, cols, T in (("b1", layout.eta1(k), T1), ("b2", layout.eta2(k), T2)):
            for t in range(T):
                c = cols[t * J:(t + 1) * J]
                out[name][idx, t] = B @ theta[c]
                V = cov[np.ix_(c, c)]
                out[name + "_se"][idx, t] = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", B, V, B),
                                                            0.0, None))
    return FieldEstimates(**out)


def aed(b_hat, b_true):
    """Absolute error deviation per site with its mean and maximum."""
    b_hat = np.asarray(b_hat, dtype=float)
    b_true = np.asarray(b_true, dtype=float)
    span = float(np.max(b_true) - np.min(b_true))
    if not span > 0:
        raise ConfigError("true surface is constant; AED is undefined")
    e = np.abs(b_hat - b_true) / span
    return e, float(e.mean()), float(e.max())
