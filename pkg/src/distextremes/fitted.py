"""Fitted marginal model: coefficient fields, per-site linear maps, persistence.

Both model modes share one representation. For margin ``m`` and site ``s``
there is a matrix ``L_m(s)`` (``q_m x p``) mapping the global parameter vector
to the site's coefficient vector ``b_m(s) = L_m(s) theta``; the marginal
parameter of replicate ``i`` is then ``z_m[i, s] @ b_m(s)`` (``log sigma`` for
the scale). In stationary mode ``L_m(s)`` just selects the margin's slice; in
varying-coefficient mode it places the block basis row under each covariate.

A saved fit is a directory with ``fit.json`` (metadata) and ``theta.npy`` /
``cov.npy``. Designs are not stored: they are rebuilt from the data and the
recorded formulas.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .partition import Partition
from .svc import BasisSpec, SvcLayout

FIT_VERSION = 1


def _as3(z, d):
    """Design as ``(n_or_1, d, q)``."""
    if z is None:
        return np.ones((1, d, 1))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return z[None] if z.ndim == 2 else z


@dataclass
class FittedModel:
    mode: str
    theta: np.ndarray
    cov: np.ndarray
    names: list
    coords: np.ndarray
    designs: tuple          # z1, z2, z3 (stationary) or cov1, cov2, z3 (svc)
    partition: Partition | None = None
    spec: BasisSpec | None = None
    layout: SvcLayout | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        d = self.coords.shape[0]
        self.designs = tuple(_as3(z, d) for z in self.designs)
        if self.mode not in ("stationary", "svc"):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.mode == "svc" and (self.spec is None or self.layout is None
                                    or self.partition is None):
            raise ConfigError("varying-coefficient fits need a basis, layout and partition")
        if self.theta.size != len(self.names) or self.cov.shape != (self.theta.size,) * 2:
            raise ConfigError("parameter vector, names and covariance disagree in size")
        widths = [z.shape[2] for z in self.designs]
        if self.mode == "stationary" and 2 + sum(widths) != self.theta.size:
            raise DataError("designs rebuilt from the data do not match the saved fit")

    @property
    def d(self) -> int:
        return self.coords.shape[0]

    def _slices(self):
        q1, q2, _ = (z.shape[2] for z in self.designs)
        return slice(2, 2 + q1), slice(2 + q1, 2 + q1 + q2), slice(2 + q1 + q2, None)

    def lifts(self, s: int):
        """``(L1, L2, L3)`` for site ``s``."""
        p = self.theta.size
        q = [z.shape[2] for z in self.designs]
        if self.mode == "stationary":
            out = []
            for sl, qm in zip(self._slices(), q):
                L = np.zeros((qm, p))
                L[np.arange(qm), np.arange(p)[sl]] = 1.0
                out.append(L)
            return tuple(out)
        k = int(self.partition.assignment[s])
        B = self.spec.matrix(k, self.coords[self.partition.blocks[k]])
        row = B[np.searchsorted(self.partition.blocks[k], s)]
        J = row.size
        out = []
        for cols, qm in ((self.layout.eta1(k), q[0]), (self.layout.eta2(k), q[1])):
            L = np.zeros((qm, p))
            for t in range(qm):
                L[t, cols[t * J:(t + 1) * J]] = row
            out.append(L)
        L3 = np.zeros((q[2], p))
        L3[np.arange(q[2]), self.layout.beta3] = 1.0
        out.append(L3)
        return tuple(out)

    def coefficients(self, theta=None):
        """Coefficient fields ``b_m`` with shape ``(d, q_m)``."""
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        if self.mode == "stationary":
            return tuple(np.broadcast_to(theta[sl], (self.d, theta[sl].size))
                         for sl in self._slices())
        q = [z.shape[2] for z in self.designs]
        b1, b2 = np.empty((self.d, q[0])), np.empty((self.d, q[1]))
        for k, idx in enumerate(self.partition.blocks):
            B = self.spec.matrix(k, self.coords[idx])
            J = B.shape[1]
            for b, cols, qm in ((b1, self.layout.eta1(k), q[0]), (b2, self.layout.eta2(k), q[1])):
                for t in range(qm):
                    b[idx, t] = B @ theta[cols[t * J:(t + 1) * J]]
        b3 = np.broadcast_to(theta[self.layout.beta3], (self.d, q[2]))
        return b1, b2, b3

    def margins(self, theta=None, designs=None):
        """``(mu, sigma, xi)``, each ``(n_or_1, d)``."""
        zs = self.designs if designs is None else tuple(_as3(z, self.d) for z in designs)
        b = self.coefficients(theta)
        mu, ls, xi = (np.einsum("nsq,sq->ns", z, bm) for z, bm in zip(zs, b))
        return mu, np.exp(ls), xi

    def site_rows(self, s: int, designs=None):
        """Rows ``D_m`` with ``(mu, log sigma, xi)[i] = D_m[i] @ theta`` at site ``s``."""
        zs = self.designs if designs is None else tuple(_as3(z, self.d) for z in designs)
        return tuple(z[:, s, :] @ L for z, L in zip(zs, self.lifts(s)))

    # persistence ----------------------------------------------------------

    def save(self, outdir, extra_meta=None) -> None:
        os.makedirs(outdir, exist_ok=True)
        meta = {"version": FIT_VERSION, "mode": self.mode, "names": list(self.names),
                "design_widths": [int(z.shape[2]) for z in self.designs]}
        if self.partition is not None:
            meta["partition"] = self.partition.flatten()
        if self.spec is not None:
            meta["basis"] = {"knots": [np.asarray(k).tolist() for k in self.spec.knots],
                             "scale": self.spec.scale, "linear": self.spec.linear}
            meta["layout"] = {"p1": list(self.layout.p1), "p2": list(self.layout.p2),
                              "q3": self.layout.q3}
        meta.update(extra_meta or {})
        with open(os.path.join(outdir, "fit.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
        np.save(os.path.join(outdir, "theta.npy"), np.ascontiguousarray(self.theta, "<f8"))
        np.save(os.path.join(outdir, "cov.npy"), np.ascontiguousarray(self.cov, "<f8"))


def load_fit(fitdir, coords, designs) -> tuple[FittedModel, dict]:
    """Read a saved fit; ``designs`` must be rebuilt from the same data."""
    try:
        with open(os.path.join(fitdir, "fit.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        theta = np.load(os.path.join(fitdir, "theta.npy"))
        cov = np.load(os.path.join(fitdir, "cov.npy"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read fit from {fitdir}: {exc}") from exc
    if meta.get("version") != FIT_VERSION:
        raise ConfigError(f"{fitdir}: unsupported fit version {meta.get('version')!r}")
    part = Partition.from_flat(meta["partition"]) if "partition" in meta else None
    spec = layout = None
    if meta["mode"] == "svc":
        b = meta["basis"]
        spec = BasisSpec(tuple(np.asarray(k, dtype=float).reshape(-1, 2) for k in b["knots"]),
                         float(b["scale"]), bool(b["linear"]))
        lay = meta["layout"]
        layout = SvcLayout(tuple(lay["p1"]), tuple(lay["p2"]), int(lay["q3"]))
    model = FittedModel(meta["mode"], theta, cov, meta["names"], np.asarray(coords, dtype=float),
                        tuple(designs), part, spec, layout)
    widths = [z.shape[2] for z in model.designs]
    if widths != meta["design_widths"]:
        raise DataError(f"design widths {widths} differ from the saved fit {meta['design_widths']}")
    return model, meta
