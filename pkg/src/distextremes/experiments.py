"""Monte Carlo designs used to check the estimator's sampling behaviour.

Each replicate is identified by its seed and cached as a small JSON record, so
long studies can be resumed and shared between the test-suite and the command
line::

    python -m distextremes.experiments stationary --seeds 0:200 --block-size 25
    python -m distextremes.experiments stationary --seeds 0:100 --block-size 100
    python -m distextremes.experiments svc --seeds 0:100

The cache lives in ``$DISTEXTREMES_CACHE`` (default ``.mc_cache`` in the
current directory).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass

import numpy as np

from .extremes_core import DependenceParams
from .partition import partition_grid
from .pipeline import FieldData, run_pipeline, run_pipeline_svc
from .simulate import Margins, SimConfig, simulate_gev_field, stationary_margins
from .svc import aed

logger = logging.getLogger(__name__)


def grid_sites(side: int) -> np.ndarray:
    """``side x side`` lattice with coordinates ``1..side``."""
    r = np.arange(1, side + 1, dtype=float)
    return np.array([(a, b) for a in r for b in r])


@dataclass(frozen=True)
class StationaryDesign:
    side: int = 10
    n: int = 500
    q: float = 0.8
    theta0: tuple = (0.8, 10.0, 0.5, 0.5, 1.5, 0.2)
    block_size: int = 25

    @property
    def tag(self) -> str:
        return f"stat_s{self.side}_n{self.n}_q{self.q}_b{self.block_size}_" + \
            "_".join(f"{x:g}" for x in self.theta0)


@dataclass(frozen=True)
class SvcDesign:
    side: int = 10
    n: int = 800
    q: float = 0.9
    alpha: float = 1.0
    phi: float = 10.0
    xi: float = 0.2
    block_size: int = 25
    grid: tuple = (0.0, 0.05, 0.1)

    @property
    def tag(self) -> str:
        return f"svc_s{self.side}_n{self.n}_q{self.q}_b{self.block_size}"


def svc_surfaces(sites):
    """Smooth location and log-scale surfaces of the first varying-coefficient design."""
    s1, s2 = sites[:, 0], sites[:, 1]
    d = sites.shape[0]
    return (s1 ** 4 + s2 ** 4 + s1 * s2) / d ** 2, np.sqrt(s1 ** 2 + s2 ** 2) / 10.0


def run_stationary(seed: int, design: StationaryDesign) -> dict:
    sites = grid_sites(design.side)
    a, ph, b11, b12, b2, b3 = design.theta0
    cfg = SimConfig(sites, design.n, DependenceParams.from_natural(a, ph),
                    stationary_margins(sites, [b11, b12], b2, b3), seed=seed)
    y = simulate_gev_field(cfg)
    data = FieldData(sites, y, np.quantile(y, design.q, axis=0), z1=sites)
    part = partition_grid(sites, design.block_size)
    t0 = time.perf_counter()
    res = run_pipeline(data, part)
    return {
        "seed": seed,
        "K": part.K,
        "natural": res.natural.tolist(),
        "natural_se": res.natural_se.tolist(),
        "theta_m": res.theta_m.tolist(),
        "se": res.se.tolist(),
        "converged": bool(np.all(res.converged)),
        "seconds": time.perf_counter() - t0,
    }


def run_svc(seed: int, design: SvcDesign) -> dict:
    sites = grid_sites(design.side)
    b1, b2 = svc_surfaces(sites)
    cfg = SimConfig(sites, design.n, DependenceParams.from_natural(design.alpha, design.phi),
                    Margins(b1, np.exp(b2), design.xi), seed=seed)
    y = simulate_gev_field(cfg)
    data = FieldData(sites, y, np.quantile(y, design.q, axis=0))
    part = partition_grid(sites, design.block_size)
    t0 = time.perf_counter()
    res = run_pipeline_svc(data, part, grid1=design.grid, grid2=design.grid)
    meta = res.meta
    keep = [0, 1, len(meta.natural) - 1]
    _, a1, m1 = aed(res.fields.b1[:, 0], b1)
    _, a2, m2 = aed(res.fields.b2[:, 0], b2)
    inside1 = np.abs(res.fields.b1[:, 0] - b1) <= 1.959963984540054 * res.fields.b1_se[:, 0]
    inside2 = np.abs(res.fields.b2[:, 0] - b2) <= 1.959963984540054 * res.fields.b2_se[:, 0]
    return {
        "seed": seed,
        "K": part.K,
        "homogeneous": [meta.natural[i] for i in keep],
        "homogeneous_se": [meta.natural_se[i] for i in keep],
        "aAED": [a1, a2],
        "mAED": [m1, m2],
        "field_coverage": [float(inside1.mean()), float(inside2.mean())],
        "lambda": list(res.lambdas),
        "converged": bool(np.all(meta.converged)),
        "seconds": time.perf_counter() - t0,
    }


def cache_dir() -> str:
    return os.environ.get("DISTEXTREMES_CACHE", os.path.join(os.getcwd(), ".mc_cache"))


def _path(tag: str, seed: int) -> str:
    return os.path.join(cache_dir(), tag, f"seed_{seed:05d}.json")


def load(tag: str, seed: int):
    try:
        with open(_path(tag, seed), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def store(tag: str, seed: int, record: dict) -> None:
    path = _path(tag, seed)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)


def replicate(kind: str, seed: int, design) -> dict:
    """Cached single replicate. Failures are cached too (with the error text)."""
    rec = load(design.tag, seed)
    if rec is not None:
        return rec
    fn = run_stationary if kind == "stationary" else run_svc
    try:
        rec = fn(seed, design)
    except Exception as exc:  # a failed replicate is a result, not a crash
        logger.warning("seed %d failed: %s", seed, exc)
        rec = {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    store(design.tag, seed, rec)
    return rec


def study(kind: str, seeds, design) -> list:
    return [replicate(kind, s, design) for s in seeds]


def _seed_range(text: str):
    lo, hi = text.split(":")
    return range(int(lo), int(hi))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m distextremes.experiments")
    ap.add_argument("kind", choices=["stationary", "svc"])
    ap.add_argument("--seeds", default="0:10", help="half-open range lo:hi")
    ap.add_argument("--block-size", type=int, default=25)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    if args.kind == "stationary":
        design = StationaryDesign(block_size=args.block_size)
    else:
        design = SvcDesign(block_size=args.block_size)
    for s in _seed_range(args.seeds):
        t = time.perf_counter()
        rec = replicate(args.kind, s, design)
        print(f"{design.tag} seed {s}: {'error' if 'error' in rec else 'ok'} "
              f"({time.perf_counter() - t:.1f}s)", flush=True)
    print(json.dumps(asdict(design)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
