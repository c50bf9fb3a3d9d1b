"""Batch command line: ``distextremes {simulate,fit,fit-svc,diagnose,return-levels}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every output file is a deterministic function of the inputs and the
configuration; wall-clock timings go to a separate ``timings.json``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import __version__
from .data import Dataset, design, ingest, standardize, thresholds
from .diagnostics import pit_values, return_level_linear, site_uniformity, uniformity_test
from .errors import ConfigError, DataError, DistExtremesError
from .extremes_core import DependenceParams
from .fitted import FittedModel, load_fit
from .gmm_integrate import natural_names
from .local_fit import FitOptions
from .partition import partition_custom, partition_grid
from .pipeline import FieldData, PipelineConfig, run_pipeline, run_pipeline_svc
from .simulate import SimConfig, simulate_gev_field, stationary_margins, write_dataset
from .svc import DEFAULT_SCALE, BasisSpec, layout_for

logger = logging.getLogger("distextremes")

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    sites: str
    observations: str
    replicates: str | None = None
    q: float = 0.9
    block_size: int | None = 25
    label_column: str | None = None
    mode: str = "stationary"
    z1: str = "1"
    z2: str = "1"
    z3: str = "1"
    lambda1: tuple = (0.0,)
    lambda2: tuple = (0.0,)
    knots: int | None = None
    basis_scale: float = DEFAULT_SCALE
    maxiter: int = 2000
    restarts: int = 2
    workers: int = 1
    drop_failed: bool = False
    standardize: bool = False
    seed: int = 0
    outdir: str = "out"

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"--q must lie in (0, 1), got {self.q}")
        if self.mode not in ("stationary", "svc"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if (self.label_column is None) == (self.block_size is None):
            raise ConfigError("choose exactly one of --block-size and --label-column")
        if self.block_size is not None and self.block_size < 2:
            raise ConfigError("--block-size must be at least 2")
        if self.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if self.mode == "stationary" and (self.lambda1 != (0.0,) or self.lambda2 != (0.0,)
                                          or self.knots is not None):
            raise ConfigError("penalty grids and knots only apply to fit-svc")
        if self.mode == "svc" and self.drop_failed:
            raise ConfigError("--drop-failed is not available in varying-coefficient mode")
        if any(x < 0 for x in self.lambda1 + self.lambda2):
            raise ConfigError("penalties must be nonnegative")

    def digest(self) -> str:
        body = {k: v for k, v in asdict(self).items() if k not in ("outdir", "workers")}
        raw = json.dumps(body, sort_keys=True, default=list).encode()
        return hashlib.sha256(raw).hexdigest()


# ---------------------------------------------------------------------------
# small writers


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def _file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _outdir(path) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


# ---------------------------------------------------------------------------
# data preparation shared by fit / diagnose / return-levels


def _load(cfg: RunConfig) -> Dataset:
    ds = ingest(cfg.sites, cfg.observations, cfg.replicates, cfg.label_column)
    return standardize(ds) if cfg.standardize else ds


def _designs(ds: Dataset, cfg: RunConfig):
    return tuple(design(ds, f) for f in (cfg.z1, cfg.z2, cfg.z3))


def _partition(ds: Dataset, cfg: RunConfig):
    if cfg.label_column is not None:
        return partition_custom(ds.coords, ds.labels)
    return partition_grid(ds.coords, cfg.block_size)


def _manifest(cfg: RunConfig, verb: str, partition) -> dict:
    files = {"sites": cfg.sites, "observations": cfg.observations}
    if cfg.replicates:
        files["replicates"] = cfg.replicates
    return {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": verb,
        "q": cfg.q,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "config_hash": cfg.digest(),
        "data": {k: {"path": os.path.abspath(v), "sha256": _file_sha(v)} for k, v in files.items()},
        "partition": {"K": partition.K, "labels": list(partition.labels),
                      "sizes": partition.sizes.tolist()},
    }


def _estimate_rows(names, est, se):
    return [{"name": n, "estimate": float(v), "se": float(s)} for n, v, s in zip(names, est, se)]


# ---------------------------------------------------------------------------
# verbs


def cmd_simulate(args) -> int:
    out = _outdir(args.outdir)
    side = args.grid_side
    r = np.arange(1, side + 1, dtype=float)
    sites = np.array([(a, b) for a in r for b in r])
    beta1 = [float(v) for v in args.beta1.split(",")]
    if len(beta1) != 2:
        raise ConfigError("--beta1 needs two comma-separated values (x and y slopes)")
    cfg = SimConfig(sites, args.n, DependenceParams.from_natural(args.alpha, args.phi),
                    stationary_margins(sites, beta1, args.beta2, args.beta3),
                    seed=args.seed, exact=not args.approximate, workers=args.workers)
    y = simulate_gev_field(cfg)
    extra = None
    if args.label_block_size:
        extra = {"block": [f"b{k}" for k in partition_grid(sites, args.label_block_size).assignment]}
    write_dataset(out, sites, y, extra_site_columns=extra)
    _write_json(os.path.join(out, "manifest.json"), {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": "simulate",
        "seed": args.seed,
        "config": {k: v for k, v in vars(args).items() if k not in ("func", "verbose")},
    })
    return 0


def _run_config(args, mode) -> RunConfig:
    grid = lambda text: tuple(float(v) for v in text.split(",")) if text else (0.0,)  # noqa: E731
    block = None if args.label_column else args.block_size
    return RunConfig(
        sites=args.sites, observations=args.observations, replicates=args.replicates,
        q=args.q, block_size=block, label_column=args.label_column, mode=mode,
        z1=args.z1, z2=args.z2, z3=args.z3,
        lambda1=grid(getattr(args, "lambda1", None)), lambda2=grid(getattr(args, "lambda2", None)),
        knots=getattr(args, "knots", None), basis_scale=getattr(args, "basis_scale", DEFAULT_SCALE),
        maxiter=args.maxiter, restarts=args.restarts, workers=args.workers,
        drop_failed=getattr(args, "drop_failed", False), standardize=args.standardize,
        seed=args.seed, outdir=args.outdir,
    )


def run_fit(cfg: RunConfig) -> dict:
    """Fit and write report, manifest, timings, fit directory (and fields for SVC)."""
    out = _outdir(cfg.outdir)
    ds = _load(cfg)
    u = thresholds(ds.y, cfg.q)
    part = _partition(ds, cfg)
    z1, z2, z3 = _designs(ds, cfg)
    pcfg = PipelineConfig(fit=FitOptions(maxiter=cfg.maxiter, restarts=cfg.restarts),
                          workers=cfg.workers, drop_failed=cfg.drop_failed)
    report = {"mode": cfg.mode, "n": ds.n, "d": ds.d, "K": part.K, "q": cfg.q,
              "scale": "standardized" if cfg.standardize else "data",
              "formulas": {"z1": cfg.z1, "z2": cfg.z2, "z3": cfg.z3}}
    if cfg.mode == "stationary":
        res = run_pipeline(FieldData(ds.coords, ds.y, u, z1, z2, z3), part, pcfg)
        meta = res
        model = FittedModel("stationary", res.theta_m, res.covariance, res.names, ds.coords,
                            (z1, z2, z3), part)
        report["estimates"] = _estimate_rows(natural_names(res.names), res.natural,
                                             res.natural_se)
        report["working"] = _estimate_rows(res.names, res.theta_m, res.se)
        report["fields"] = "omitted: stationary mode has no coefficient surfaces"
    else:
        spec = BasisSpec.build(ds.coords, part, count=cfg.knots, scale=cfg.basis_scale)
        svc = run_pipeline_svc(FieldData(ds.coords, ds.y, u, z3=z3), part, spec,
                               cfg.lambda1, cfg.lambda2, pcfg, cov1=z1, cov2=z2)
        meta = svc.meta
        model = FittedModel("svc", meta.theta_m, meta.covariance, meta.names, ds.coords,
                            (z1, z2, z3), part, spec, layout_for(spec, z1, z2, z3.shape[-1]))
        keep = [0, 1, *range(len(meta.names) - model.designs[2].shape[2], len(meta.names))]
        nat = natural_names(meta.names)
        report["estimates"] = [{"name": nat[i], "estimate": float(meta.natural[i]),
                                "se": float(meta.natural_se[i])} for i in keep]
        report["lambda"] = list(svc.lambdas)
        report["gcv"] = [list(row) for row in svc.gcv_table]
        report["basis"] = {"knots": [len(k) for k in spec.knots], "scale": spec.scale}
        report["fields"] = "fields.csv"
        _write_fields(os.path.join(out, "fields.csv"), ds, svc.fields, cfg)
    report["convergence"] = {"all_converged": bool(np.all(meta.converged)),
                             "blocks": meta.extras.get("round_one", [])}
    if not np.all(meta.converged):
        logger.warning("blocks %s did not converge",
                       [part.labels[k] for k in np.flatnonzero(~np.asarray(meta.converged))])
    model.save(os.path.join(out, "fit"), {"config_hash": cfg.digest()})
    _write_json(os.path.join(out, "report.json"), report)
    _write_json(os.path.join(out, "manifest.json"), _manifest(cfg, "fit" if cfg.mode ==
                                                              "stationary" else "fit-svc", part))
    _write_json(os.path.join(out, "timings.json"), meta.extras.get("timings", {}))
    return report


def _write_fields(path, ds: Dataset, fields, cfg: RunConfig) -> None:
    t1 = [t.strip() for t in cfg.z1.split(",") if t.strip()]
    t2 = [t.strip() for t in cfg.z2.split(",") if t.strip()]
    header = ["site_id", "x", "y"]
    header += [h for t in t1 for h in (f"b1[{t}]", f"b1[{t}]_se")]
    header += [h for t in t2 for h in (f"b2[{t}]", f"b2[{t}]_se")]
    data_scale = cfg.z1 == "1" and cfg.z2 == "1"
    if data_scale:
        header += ["mu", "mu_se", "sigma", "sigma_se"]
    st = ds.standardization
    rows = []
    for j, sid in enumerate(ds.site_ids):
        row = [sid, ds.coords[j, 0], ds.coords[j, 1]]
        for t in range(len(t1)):
            row += [fields.b1[j, t], fields.b1_se[j, t]]
        for t in range(len(t2)):
            row += [fields.b2[j, t], fields.b2_se[j, t]]
        if data_scale:
            c, s = (0.0, 1.0) if st is None else (st.center[j], st.scale[j])
            row += [c + s * fields.mu[j], s * fields.b1_se[j, 0],
                    s * fields.sigma[j], s * fields.sigma_se[j]]
        rows.append(row)
    _write_csv(path, header, rows)


def _config_from_fit(fitroot) -> RunConfig:
    try:
        with open(os.path.join(fitroot, "manifest.json"), encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {fitroot}/manifest.json: {exc}") from exc
    c = man["config"]
    c["lambda1"], c["lambda2"] = tuple(c["lambda1"]), tuple(c["lambda2"])
    cfg = RunConfig(**c)
    for key, spec in man["data"].items():
        if _file_sha(spec["path"]) != spec["sha256"]:
            raise DataError(f"{spec['path']} changed since the fit ({key})")
    return cfg


def _fitted(fitroot):
    cfg = _config_from_fit(fitroot)
    ds = _load(cfg)
    model, _ = load_fit(os.path.join(fitroot, "fit"), ds.coords, _designs(ds, cfg))
    return cfg, ds, model


def cmd_fit(args, mode) -> int:
    run_fit(_run_config(args, mode))
    return 0


def cmd_diagnose(args) -> int:
    cfg, ds, model = _fitted(args.fit)
    out = _outdir(args.outdir or args.fit)
    mu, sigma, xi = (np.broadcast_to(v, ds.y.shape) for v in model.margins())
    u, flag = pit_values(ds.y, mu, sigma, xi)
    rows = []
    for i, rid in enumerate(ds.replicate_ids):
        for j, sid in enumerate(ds.site_ids):
            if np.isfinite(ds.y[i, j]):
                rows.append([rid, sid, float(u[i, j]), int(flag[i, j])])
    _write_csv(os.path.join(out, "pit.csv"), ["replicate_id", "site_id", "pit", "support_flag"],
               rows)
    ks = uniformity_test(u)
    site_p, combined = site_uniformity(u)
    summary = {"pooled_ks_statistic": float(ks.statistic), "pooled_ks_pvalue": float(ks.pvalue),
               "site_ks_bonferroni_pvalue": combined,
               "site_ks_pvalues": dict(zip(ds.site_ids, site_p.tolist())),
               "n_values": int(np.isfinite(u).sum()),
               "below_support": int((flag == -1).sum()), "above_support": int((flag == 1).sum())}
    if summary["below_support"] or summary["above_support"]:
        logger.warning("%d observations fall outside the fitted support",
                       summary["below_support"] + summary["above_support"])
    _write_json(os.path.join(out, "diagnostics.json"), summary)
    return 0


def _month_designs(ds: Dataset, cfg: RunConfig, model: FittedModel, months: int, path):
    """Designs evaluated at the ``months`` periods of one year."""
    if all(z.shape[0] == 1 for z in model.designs):
        return tuple(np.repeat(z, months, axis=0) for z in model.designs)
    if path is None:
        if ds.n < months:
            raise DataError(f"need {months} replicates to read the month covariates")
        logger.warning("taking month covariates from the first %d replicates", months)
        covs = {k: v[:months] for k, v in ds.replicate_covariates.items()}
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != months:
            raise DataError(f"{path}: expected {months} rows, found {len(rows)}")
        try:
            covs = {k: np.array([float(r[k]) for r in rows]) for k in ds.replicate_covariates}
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: bad month covariates ({exc})") from exc
    dm = replace(ds, y=np.zeros((months, ds.d)), replicate_ids=list(range(months)),
                 replicate_covariates=covs)
    return tuple(z if z.ndim == 3 else np.repeat(z[None], months, axis=0)
                 for z in _designs(dm, cfg))


def cmd_return_levels(args) -> int:
    cfg, ds, model = _fitted(args.fit)
    out = _outdir(args.outdir or args.fit)
    periods = [float(v) for v in args.periods.split(",")]
    if any(not r > 1 for r in periods):
        raise ConfigError("return periods must exceed 1")
    sites = range(ds.d) if not args.site else [ds.site_index(s) for s in args.site.split(",")]
    zs = _month_designs(ds, cfg, model, args.months_per_year, args.month_covariates)
    st = ds.standardization
    rows = []
    for s in sites:
        D = model.site_rows(s, zs)
        c, sc = (0.0, 1.0) if st is None else (st.center[s], st.scale[s])
        for r in sorted(periods):
            level, se = return_level_linear(*D, model.theta, model.cov, r)
            rows.append([ds.site_ids[s], r, c + sc * level, sc * se])
    _write_csv(os.path.join(out, "return_levels.csv"), ["site_id", "period", "level", "se"], rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _data_args(p):
    p.add_argument("--sites", required=True, help="site table (site_id,x,y,...)")
    p.add_argument("--observations", required=True, help="observations (replicate_id,site_id,value)")
    p.add_argument("--replicates", help="optional per-replicate covariates")
    p.add_argument("--q", type=float, default=0.9, help="threshold quantile (default 0.9)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--block-size", type=int, default=25, help="target sites per grid block")
    g.add_argument("--label-column", help="site-table column defining the blocks")
    p.add_argument("--z1", default="1", help="location design terms, e.g. '1,x,y'")
    p.add_argument("--z2", default="1", help="log-scale design terms")
    p.add_argument("--z3", default="1", help="shape design terms")
    p.add_argument("--standardize", action="store_true",
                   help="center sites at the median and divide by the 5%%-95%% range")
    p.add_argument("--maxiter", type=int, default=2000)
    p.add_argument("--restarts", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="recorded in the manifest")
    p.add_argument("--outdir", default="out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distextremes", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="simulate a Brown-Resnick dataset on a grid")
    p.add_argument("--grid-side", type=int, default=10)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--phi", type=float, default=10.0)
    p.add_argument("--beta1", default="0.5,0.5", help="location slopes on x,y")
    p.add_argument("--beta2", type=float, default=1.5, help="log scale")
    p.add_argument("--beta3", type=float, default=0.2, help="shape")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--approximate", action="store_true", help="spectral sampler")
    p.add_argument("--label-block-size", type=int, default=0,
                   help="add a 'block' column from a grid partition of this size")
    p.add_argument("--outdir", default="data")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="stationary distributed fit")
    _data_args(p)
    p.add_argument("--drop-failed", action="store_true",
                   help="exclude non-converged blocks from the meta-estimate")
    p.set_defaults(func=lambda a: cmd_fit(a, "stationary"))

    p = sub.add_parser("fit-svc", help="spatially varying coefficient fit")
    _data_args(p)
    p.add_argument("--lambda1", default="0", help="comma-separated location penalty grid")
    p.add_argument("--lambda2", default="0", help="comma-separated log-scale penalty grid")
    p.add_argument("--knots", type=int, help="knots per block (default: size/2.5, at most 10)")
    p.add_argument("--basis-scale", type=float, default=DEFAULT_SCALE)
    p.set_defaults(func=lambda a: cmd_fit(a, "svc"))

    p = sub.add_parser("diagnose", help="PIT values of a saved fit")
    p.add_argument("--fit", required=True, help="output directory of fit / fit-svc")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("return-levels", help="r-year return levels of a saved fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--periods", default="10,50,100")
    p.add_argument("--site", help="comma-separated site ids (default all)")
    p.add_argument("--months-per-year", type=int, default=12)
    p.add_argument("--month-covariates", help="CSV with one row per month of the year")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_return_levels)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DistExtremesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
