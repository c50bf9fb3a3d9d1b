"""Combining block estimates through the stacked score conditions.

Round two produces, for every block ``k``, the per-replicate kernels
``psi_ik(theta_c)`` and the sensitivity ``I_k(theta_c)`` at the average of the
block estimates. With ``C`` the uncentered second moment of the stacked kernels
and ``W_k`` the ``k``-th diagonal block of ``C^-1``, the meta-estimator is

    theta_m = H^-1 sum_k I_k' W_k I_k theta_k,      H = sum_k I_k' W_k I_k,

with covariance ``H^-1 G H^-T / n`` where
``G = sum_{k,k'} I_k' W_k C_kk' W_k' I_k'``.

The same algebra handles the varying-coefficient model, in which block ``k``
only informs a subset of the global parameters (``index_maps``) and a ridge
penalty acts on some coordinates; see :func:`combine`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special

from .errors import ConvergenceError, NumericalError, NumericalRankError, SupportError

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
RIDGES = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def param_names(q1: int, q2: int, q3: int) -> list[str]:
    return (["omega", "zeta"] + [f"beta1_{j}" for j in range(q1)]
            + [f"beta2_{j}" for j in range(q2)] + [f"beta3_{j}" for j in range(q3)])


def natural_names(names) -> list[str]:
    mapping = {"omega": "alpha", "zeta": "phi"}
    return [mapping.get(x, x) for x in names]


def average_mcles(thetas, converged=None, drop_failed: bool = False):
    """Componentwise mean of block estimates.

    Returns ``(theta_c, kept)`` where ``kept`` lists the indices of blocks that
    entered the average. Non-converged blocks abort the integration unless
    ``drop_failed`` is set, in which case they are skipped with a warning.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    K = thetas.shape[0]
    ok = np.ones(K, bool) if converged is None else np.asarray(converged, bool)
    failed = [int(k) for k in np.flatnonzero(~ok)]
    if failed and not drop_failed:
        raise ConvergenceError(f"blocks {failed} did not converge", blocks=failed)
    if failed:
        logger.warning("dropping non-converged blocks %s", failed)
    kept = np.flatnonzero(ok)
    if kept.size == 0:
        raise ConvergenceError("no block converged", blocks=failed)
    return thetas[kept].mean(axis=0), kept


@dataclass
class StackedScores:
    """Per-replicate kernels of all blocks side by side, ``(n, sum_k p_k)``."""

    psi_all: np.ndarray
    offsets: tuple

    @classmethod
    def from_blocks(cls, psis) -> "StackedScores":
        psis = [np.asarray(p, dtype=float) for p in psis]
        rows = {p.shape[0] for p in psis}
        if len(rows) != 1:
            raise NumericalError(f"blocks disagree on the number of replicates: {sorted(rows)}")
        widths = [p.shape[1] for p in psis]
        offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(widths)]))
        return cls(np.hstack(psis), offsets)

    @property
    def K(self) -> int:
        return len(self.offsets) - 1

    @property
    def n(self) -> int:
        return self.psi_all.shape[0]

    def block(self, k: int) -> slice:
        return slice(self.offsets[k], self.offsets[k + 1])

    def scores(self) -> list[np.ndarray]:
        mean = self.psi_all.mean(axis=0)
        return [mean[self.block(k)] for k in range(self.K)]


def sample_covariance(stacked: StackedScores) -> np.ndarray:
    """``C = (1/n) sum_i psi_i psi_i'`` (uncentered)."""
    psi = stacked.psi_all
    bad = ~np.isfinite(psi)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        k = int(np.searchsorted(stacked.offsets, j, side="right") - 1)
        raise NumericalError(f"non-finite score kernel at replicate {i}, block {k}")
    n, m = psi.shape
    if n < 2 * m:
        logger.warning("only %d replicates for %d stacked score components; "
                       "the weight matrix may be poorly estimated", n, m)
    return psi.T @ psi / n


def stable_inverse(C) -> np.ndarray:
    """Inverse of a symmetric PSD matrix with an escalating ridge."""
    C = 0.5 * (np.asarray(C, dtype=float) + np.asarray(C, dtype=float).T)
    scale = float(np.mean(np.diag(C)))
    if not scale > 0:
        raise NumericalRankError("score covariance has a zero diagonal")
    eye = np.eye(C.shape[0])
    for ridge in RIDGES:
        Cr = C + ridge * scale * eye
        if np.linalg.cond(Cr) > MAX_CONDITION:
            continue
        try:
            fac = linalg.cho_factor(Cr)
        except linalg.LinAlgError:
            continue
        if ridge:
            logger.warning("score covariance regularized with ridge %.0e", ridge)
        inv = linalg.cho_solve(fac, eye)
        return 0.5 * (inv + inv.T)
    raise NumericalRankError(
        f"score covariance has condition number {np.linalg.cond(C):.3g} even after ridge"
    )


def block_weights(C, offsets) -> list[np.ndarray]:
    """Diagonal blocks of ``C^-1`` along the stacked layout."""
    Cinv = stable_inverse(C)
    return [Cinv[offsets[k]:offsets[k + 1], offsets[k]:offsets[k + 1]]
            for k in range(len(offsets) - 1)]


def _pad(I, cols, p_global):
    out = np.zeros((I.shape[0], p_global))
    out[:, cols] = I
    return out


def _solve_normal(H, rhs):
    Hs = 0.5 * (H + H.T)
    eig = np.linalg.eigvalsh(Hs)
    if not (eig[0] > 0 and eig[-1] / eig[0] < MAX_CONDITION):
        raise NumericalRankError(
            "normal matrix is singular or ill-conditioned; eigenvalues "
            + np.array2string(eig, precision=3)
        )
    return np.linalg.solve(H, rhs)


@dataclass
class Combination:
    theta: np.ndarray
    H: np.ndarray
    padded: list = field(repr=False)
    weights: list = field(repr=False)


def combine(thetas, sens, weights, index_maps=None, p_global=None, penalty=None) -> Combination:
    """Penalized weighted combination of block estimates.

    Block ``k`` estimates the global coordinates ``index_maps[k]``. With
    ``I~_k`` the sensitivity zero-padded to the global columns,

        theta = (sum_k I~_k' W_k I~_k + diag(penalty))^-1 sum_k I~_k' W_k I_k theta_k.
    """
    K = len(thetas)
    if index_maps is None:
        p_global = len(thetas[0])
        index_maps = [np.arange(p_global)] * K
    penalty = np.zeros(p_global) if penalty is None else np.asarray(penalty, dtype=float)
    H = np.diag(penalty).astype(float)
    rhs = np.zeros(p_global)
    padded = []
    for th, I, W, cols in zip(thetas, sens, weights, index_maps):
        I = np.asarray(I, dtype=float)
        It = _pad(I, cols, p_global)
        padded.append(It)
        WIt = W @ It
        H += It.T @ WIt
        rhs += WIt.T @ (I @ np.asarray(th, dtype=float))
    return Combination(_solve_normal(H, rhs), H, padded, list(weights))


def sandwich_from(comb: Combination, C, offsets, n: int) -> np.ndarray:
    """``H^-1 G H^-T / n`` for a :class:`Combination`."""
    A = np.vstack([W @ It for W, It in zip(comb.weights, comb.padded)])
    if A.shape[0] != offsets[-1]:
        raise NumericalError("stacked layout does not match the weight blocks")
    G = A.T @ C @ A
    Hinv = np.linalg.inv(comb.H)
    cov = Hinv @ G @ Hinv.T / n
    return 0.5 * (cov + cov.T)


def meta_estimate(thetas, sens, weights) -> np.ndarray:
    """Closed-form meta-estimator ``H^-1 sum_k I_k' W_k I_k theta_k``."""
    return combine(thetas, sens, weights).theta


def sandwich_covariance(sens, weights, C, n: int) -> np.ndarray:
    """Covariance of the meta-estimator, ``n^-1 H^-1 G H^-T``."""
    p = np.asarray(sens[0]).shape[1]
    comb = combine([np.zeros(p)] * len(sens), sens, weights)
    offsets = np.concatenate([[0], np.cumsum([np.asarray(I).shape[0] for I in sens])])
    return sandwich_from(comb, np.asarray(C, dtype=float), offsets, n)


def delta_transform(theta, cov):
    """Map ``(omega, zeta, ...)`` to ``(alpha, phi, ...)`` with the delta method."""
    theta = np.asarray(theta, dtype=float)
    nat = theta.copy()
    nat[0] = 2.0 * special.expit(theta[0])
    nat[1] = np.exp(theta[1])
    jac = np.ones_like(theta)
    jac[0] = nat[0] / (1.0 + np.exp(theta[0]))
    jac[1] = nat[1]
    D = np.diag(jac)
    return nat, D.T @ np.asarray(cov, dtype=float) @ D


def gmm_objective_oracle(theta, scores, weights, n: int) -> float:
    """``n sum_k Psi_k(theta)' W_k Psi_k(theta)``.

    ``scores`` holds either the vectors ``Psi_k`` evaluated at ``theta`` or
    callables returning them.
    """
    total = 0.0
    for s, W in zip(scores, weights):
        v = np.asarray(s(theta) if callable(s) else s, dtype=float)
        total += float(v @ W @ v)
    return n * total


def minimize_gmm_objective(score_fns, weights, n: int, x0, tol: float = 1e-12):
    """Direct numerical minimizer of :func:`gmm_objective_oracle` (test oracle).

    The quadratic form is written as a sum of squares ``||L_k' Psi_k||^2`` with
    ``W_k = L_k L_k'`` and handed to a trust-region least-squares solver.
    Points outside the GEV support get a huge residual so the trust region
    shrinks back into the admissible set.
    """
    factors = [np.linalg.cholesky(0.5 * (W + W.T)) for W in weights]
    size = sum(L.shape[1] for L in factors)

    def resid(th):
        try:
            return np.sqrt(n) * np.concatenate([L.T @ f(th) for f, L in zip(score_fns, factors)])
        except SupportError:
            return np.full(size, 1e75)

    res = optimize.least_squares(resid, np.asarray(x0, dtype=float), xtol=tol, ftol=tol,
                                 gtol=tol, method="trf", x_scale="jac")
    return res.x, res


@dataclass
class MetaResult:
    """Integrated estimate with sandwich covariance on both scales."""

    theta_m: np.ndarray
    covariance: np.ndarray
    natural: np.ndarray
    natural_covariance: np.ndarray
    names: list
    theta_blocks: np.ndarray
    theta_c: np.ndarray
    converged: np.ndarray
    kept_blocks: np.ndarray
    n: int
    labels: tuple = ()
    extras: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def natural_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.natural_covariance), 0.0, None))

    def summary(self) -> dict:
        nat = natural_names(self.names)
        return {
            "working": {k: {"estimate": float(v), "se": float(s)}
                        for k, v, s in zip(self.names, self.theta_m, self.se)},
            "natural": {k: {"estimate": float(v), "se": float(s)}
                        for k, v, s in zip(nat, self.natural, self.natural_se)},
        }


def integrate(thetas, psis, sens, n: int, names, converged=None, theta_c=None,
              labels=(), kept=None) -> MetaResult:
    """Round-two reduction for the stationary model."""
    stacked = StackedScores.from_blocks(psis)
    C = sample_covariance(stacked)
    W = block_weights(C, stacked.offsets)
    comb = combine(thetas, sens, W)
    cov = sandwich_from(comb, C, stacked.offsets, n)
    nat, nat_cov = delta_transform(comb.theta, cov)
    thetas = np.asarray(thetas, dtype=float)
    return MetaResult(
        theta_m=comb.theta,
        covariance=cov,
        natural=nat,
        natural_covariance=nat_cov,
        names=list(names),
        theta_blocks=thetas,
        theta_c=thetas.mean(axis=0) if theta_c is None else np.asarray(theta_c),
        converged=np.ones(len(thetas), bool) if converged is None else np.asarray(converged),
        kept_blocks=np.arange(len(thetas)) if kept is None else np.asarray(kept),
        n=n,
        labels=tuple(labels),
    )
