"""Two-round distributed fit.

1. every block maximizes its own CCL and sends back ``theta_k`` (round one);
2. the reducer averages the block estimates into ``theta_c``;
3. every block evaluates its score kernels and sensitivity at ``theta_c``
   (round two);
4. the reducer forms the weights, the meta-estimate and its covariance.

Workers only ever see their own block. Messages travel as versioned byte
records (little-endian, fixed field order), so a multi-host runner only needs
to move bytes. Results are reduced in block order, which makes the output
independent of the number of workers and of completion order.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError
from .gmm_integrate import (
    MetaResult, StackedScores, average_mcles, block_weights, delta_transform, integrate,
    param_names, sample_covariance, sandwich_from,
)
from .local_fit import (
    BlockData, FitOptions, block_kernels, block_sensitivity, fit_block,
)
from .partition import Partition
from .svc import (
    BasisSpec, FieldEstimates, gcv_search, layout_for, reconstruct_fields, svc_block_data,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_R1_MAGIC = b"DXR1"
_R2_MAGIC = b"DXR2"


# ---------------------------------------------------------------------------
# messages


@dataclass
class RoundOneMsg:
    block_id: int
    theta: np.ndarray
    converged: bool
    ccl: float
    grad_norm: float
    n_iter: int
    n_eval: int

    _HEAD = struct.Struct("<4sHIIBII")

    def to_bytes(self) -> bytes:
        theta = np.ascontiguousarray(self.theta, dtype="<f8")
        head = self._HEAD.pack(_R1_MAGIC, SCHEMA_VERSION, self.block_id, theta.size,
                               int(self.converged), self.n_iter, self.n_eval)
        return head + struct.pack("<dd", self.ccl, self.grad_norm) + theta.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RoundOneMsg":
        magic, ver, bid, p, conv, nit, nev = cls._HEAD.unpack_from(raw, 0)
        if magic != _R1_MAGIC or ver != SCHEMA_VERSION:
            raise ProtocolError(f"unexpected round-one record {magic!r} v{ver}")
        off = cls._HEAD.size
        ccl, gn = struct.unpack_from("<dd", raw, off)
        off += 16
        if len(raw) != off + 8 * p:
            raise ProtocolError("truncated round-one record")
        theta = np.frombuffer(raw, dtype="<f8", count=p, offset=off).astype(float)
        return cls(bid, theta, bool(conv), ccl, gn, nit, nev)


@dataclass
class RoundTwoMsg:
    block_id: int
    psi: np.ndarray
    sensitivity: np.ndarray | None = None

    _HEAD = struct.Struct("<4sHIIIB")

    def to_bytes(self) -> bytes:
        psi = np.ascontiguousarray(self.psi, dtype="<f8")
        n, p = psi.shape
        has_i = self.sensitivity is not None
        out = self._HEAD.pack(_R2_MAGIC, SCHEMA_VERSION, self.block_id, n, p, int(has_i))
        out += psi.tobytes()
        if has_i:
            out += np.ascontiguousarray(self.sensitivity, dtype="<f8").tobytes()
        return out

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RoundTwoMsg":
        magic, ver, bid, n, p, has_i = cls._HEAD.unpack_from(raw, 0)
        if magic != _R2_MAGIC or ver != SCHEMA_VERSION:
            raise ProtocolError(f"unexpected round-two record {magic!r} v{ver}")
        off = cls._HEAD.size
        if len(raw) != off + 8 * (n * p + (p * p if has_i else 0)):
            raise ProtocolError("truncated round-two record")
        psi = np.frombuffer(raw, "<f8", n * p, off).reshape(n, p).astype(float)
        sens = None
        if has_i:
            sens = np.frombuffer(raw, "<f8", p * p, off + 8 * n * p).reshape(p, p).astype(float)
        return cls(bid, psi, sens)


# ---------------------------------------------------------------------------
# worker tasks (top level so they can be pickled)


def _task_fit(args) -> bytes:
    data, init, opts = args
    res = fit_block(data, init=init, opts=opts)
    return RoundOneMsg(data.block_id, res.theta, res.converged, res.ccl, res.grad_norm,
                       res.n_iter, res.n_eval).to_bytes()


def _task_kernels(args) -> bytes:
    data, theta, with_sensitivity = args
    psi = block_kernels(theta, data)
    sens = block_sensitivity(theta, data) if with_sensitivity else None
    return RoundTwoMsg(data.block_id, psi, sens).to_bytes()


def _scatter(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# data container


@dataclass
class FieldData:
    """Observations on all sites with thresholds and marginal designs."""

    coords: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z1: np.ndarray | None = None
    z2: np.ndarray | None = None
    z3: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        d = self.coords.shape[0]
        if self.y.ndim != 2 or self.y.shape[1] != d or self.u.shape != (d,):
            raise ConfigError("coords, observations and thresholds disagree on the number of sites")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @staticmethod
    def _take(z, idx):
        if z is None:
            return None
        z = np.asarray(z, dtype=float)
        return z[idx] if z.ndim <= 2 else z[:, idx]

    def block(self, idx, block_id: int) -> BlockData:
        return BlockData(self.coords[idx], self.y[:, idx], self.u[idx],
                         z1=self._take(self.z1, idx), z2=self._take(self.z2, idx),
                         z3=self._take(self.z3, idx), block_id=block_id)


@dataclass(frozen=True)
class PipelineConfig:
    fit: FitOptions = field(default_factory=FitOptions)
    workers: int = 1
    drop_failed: bool = False


def _round_one(blocks, inits, cfg):
    tasks = [(b, init, cfg.fit) for b, init in zip(blocks, inits)]
    msgs = [RoundOneMsg.from_bytes(r) for r in _scatter(_task_fit, tasks, cfg.workers)]
    msgs.sort(key=lambda m: m.block_id)
    if [m.block_id for m in msgs] != [b.block_id for b in blocks]:
        raise ProtocolError("round one did not return exactly one message per block")
    return msgs


def _round_two(blocks, thetas, cfg, with_sensitivity=True):
    tasks = [(b, th, with_sensitivity) for b, th in zip(blocks, thetas)]
    msgs = [RoundTwoMsg.from_bytes(r) for r in _scatter(_task_kernels, tasks, cfg.workers)]
    msgs.sort(key=lambda m: m.block_id)
    rows = {m.psi.shape[0] for m in msgs}
    if len(rows) != 1:
        raise ProtocolError(f"round-two kernels disagree on the replicate count: {sorted(rows)}")
    for m in msgs:
        if not np.all(np.isfinite(m.psi)) or (
                m.sensitivity is not None and not np.all(np.isfinite(m.sensitivity))):
            raise ProtocolError(f"block {m.block_id} returned non-finite round-two entries")
    return msgs


def _design_width(z):
    return 1 if z is None else (1 if np.ndim(z) == 1 else np.shape(z)[-1])


def run_pipeline(data: FieldData, partition: Partition, config: PipelineConfig | None = None,
                 inits=None) -> MetaResult:
    """Distributed fit of the stationary model."""
    cfg = config or PipelineConfig()
    if partition.assignment.size != data.coords.shape[0]:
        raise ConfigError("partition and data disagree on the number of sites")
    t0 = time.perf_counter()
    blocks = [data.block(idx, k) for k, idx in enumerate(partition.blocks)]
    inits = [None] * len(blocks) if inits is None else list(inits)
    r1 = _round_one(blocks, inits, cfg)
    t1 = time.perf_counter()
    theta_c, kept = average_mcles([m.theta for m in r1], [m.converged for m in r1],
                                  cfg.drop_failed)
    used = [blocks[k] for k in kept]
    r2 = _round_two(used, [theta_c] * len(used), cfg)
    t2 = time.perf_counter()
    names = param_names(_design_width(data.z1), _design_width(data.z2), _design_width(data.z3))
    res = integrate([r1[k].theta for k in kept], [m.psi for m in r2],
                    [m.sensitivity for m in r2], data.n, names,
                    converged=[m.converged for m in r1], theta_c=theta_c,
                    labels=partition.labels, kept=kept)
    res.theta_blocks = np.array([m.theta for m in r1])
    res.extras.update({
        "round_one": [{"block": partition.labels[m.block_id], "converged": m.converged,
                       "grad_norm": m.grad_norm, "iterations": m.n_iter, "ccl": m.ccl}
                      for m in r1],
        "timings": {"round_one": t1 - t0, "round_two": t2 - t1,
                    "reduce": time.perf_counter() - t2},
    })
    return res


@dataclass
class SvcResult:
    meta: MetaResult
    fields: FieldEstimates
    spec: BasisSpec
    lambdas: tuple
    gcv_table: list


def run_pipeline_svc(data: FieldData, partition: Partition, spec: BasisSpec | None = None,
                     grid1=(0.0,), grid2=(0.0,), config: PipelineConfig | None = None,
                     cov1=None, cov2=None) -> SvcResult:
    """Distributed fit of the varying-coefficient model with GCV over the penalties.

    ``data.z1``/``data.z2`` are ignored; the location and log-scale designs are
    the block bases multiplied by the optional covariates ``cov1``/``cov2``
    (``(d, T)`` or ``(n, d, T)``).
    """
    cfg = config or PipelineConfig()
    if cfg.drop_failed:
        raise ConfigError("dropping blocks is not supported in varying-coefficient mode")
    t0 = time.perf_counter()
    spec = spec or BasisSpec.build(data.coords, partition)
    if spec.K != partition.K:
        raise ConfigError("basis specification and partition disagree on K")
    q3 = _design_width(data.z3)
    layout = layout_for(spec, cov1, cov2, q3)
    blocks = []
    for k, idx in enumerate(partition.blocks):
        B = spec.matrix(k, data.coords[idx])
        blocks.append(svc_block_data(data.coords[idx], data.y[:, idx], data.u[idx], B,
                                     z3=FieldData._take(data.z3, idx),
                                     cov1=FieldData._take(cov1, idx),
                                     cov2=FieldData._take(cov2, idx), block_id=k))
    r1 = _round_one(blocks, [None] * len(blocks), cfg)
    average_mcles([m.theta[:2] for m in r1], [m.converged for m in r1])
    t1 = time.perf_counter()
    # average every global coordinate over the blocks that estimate it
    total = np.zeros(layout.p_global)
    count = np.zeros(layout.p_global)
    for k, m in enumerate(r1):
        total[layout.index_map(k)] += m.theta
        count[layout.index_map(k)] += 1
    theta_c = total / count
    r2 = _round_two(blocks, [layout.block_theta(theta_c, k) for k in range(layout.K)], cfg)
    t2 = time.perf_counter()

    stacked = StackedScores.from_blocks([m.psi for m in r2])
    C = sample_covariance(stacked)
    W = block_weights(C, stacked.offsets)
    thetas = [m.theta for m in r1]
    sens = [m.sensitivity for m in r2]

    def kernels_at(theta):
        msgs = _round_two(blocks, [layout.block_theta(theta, k) for k in range(layout.K)],
                          cfg, with_sensitivity=False)
        return [m.psi for m in msgs]

    search = gcv_search(thetas, sens, W, layout, data.n, grid1, grid2, kernels_at)
    comb = search.comb
    cov = sandwich_from(comb, C, stacked.offsets, data.n)
    nat, nat_cov = delta_transform(comb.theta, cov)
    meta = MetaResult(
        theta_m=comb.theta, covariance=cov, natural=nat, natural_covariance=nat_cov,
        names=layout.names(), theta_blocks=np.array(thetas, dtype=object),
        theta_c=theta_c, converged=np.array([m.converged for m in r1]),
        kept_blocks=np.arange(len(blocks)), n=data.n, labels=partition.labels,
    )
    meta.extras.update({
        "round_one": [{"block": partition.labels[m.block_id], "converged": m.converged,
                       "grad_norm": m.grad_norm, "iterations": m.n_iter, "ccl": m.ccl}
                      for m in r1],
        "lambda": [search.lam1, search.lam2],
        "timings": {"round_one": t1 - t0, "round_two": t2 - t1,
                    "reduce": time.perf_counter() - t2},
    })
    fields = reconstruct_fields(comb.theta, cov, spec, layout, data.coords, partition)
    return SvcResult(meta, fields, spec, (search.lam1, search.lam2), search.table)


def result_bytes(res: MetaResult) -> bytes:
    """Canonical byte image of the numerical content of a result."""
    parts = [res.theta_m, res.covariance, res.natural, res.natural_covariance, res.theta_c]
    blocks = res.theta_blocks
    if blocks.dtype != object:
        parts.append(blocks)
    else:
        parts.extend(np.asarray(b, dtype=float) for b in blocks)
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in parts)


def result_digest(res: MetaResult) -> str:
    return hashlib.sha256(result_bytes(res)).hexdigest()
