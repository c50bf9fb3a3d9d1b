"""Ingestion of site/observation tables, thresholds, standardization, designs.

Input format (UTF-8, comma separated, header row required):

``sites.csv``
    ``site_id, x, y`` followed by optional columns: a block label and/or
    numeric site covariates.
``observations.csv``
    ``replicate_id, site_id, value``. Missing (replicate, site) combinations
    are allowed and become NaN; duplicated combinations are rejected.
``replicates.csv`` (optional)
    ``replicate_id`` followed by numeric per-replicate covariates, e.g.
    harmonics of the observation month.

Replicates are ordered by id (numerically when every id is an integer) and
re-indexed ``0..n-1``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SITE_COLUMNS = ("site_id", "x", "y")
OBS_COLUMNS = ("replicate_id", "site_id", "value")
MIN_THRESHOLD_OBS = 20


@dataclass(frozen=True)
class Standardization:
    """Per-site affine map ``z = (y - center) / scale``."""

    center: np.ndarray
    scale: np.ndarray

    def forward(self, y):
        return (np.asarray(y, dtype=float) - self.center) / self.scale

    def inverse(self, z, site=None):
        z = np.asarray(z, dtype=float)
        if site is None:
            return z * self.scale + self.center
        return z * self.scale[site] + self.center[site]


@dataclass
class Dataset:
    site_ids: list
    coords: np.ndarray
    y: np.ndarray
    replicate_ids: list
    site_covariates: dict = field(default_factory=dict)
    labels: np.ndarray | None = None
    replicate_covariates: dict = field(default_factory=dict)
    standardization: Standardization | None = None
    site_text: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.y.shape[1]

    def site_index(self, site_id) -> int:
        try:
            return self.site_ids.index(str(site_id))
        except ValueError:
            raise DataError(f"unknown site {site_id!r}") from None


def _read_table(path, required):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header is {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, [c.strip() for c in row]))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, rows


def _number(text, path, lineno, col):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {col!r} is not numeric: {text!r}") from None


def _order_ids(ids):
    ids = list(dict.fromkeys(ids))
    try:
        return sorted(ids, key=lambda s: int(s))
    except ValueError:
        return sorted(ids)


def ingest(sites_path, obs_path, replicates_path=None, label_column=None) -> Dataset:
    """Read and validate a dataset; raise :class:`DataError` naming file and row."""
    header, rows = _read_table(sites_path, SITE_COLUMNS)
    if label_column is not None and label_column not in header:
        raise DataError(f"{sites_path}: no label column {label_column!r}")
    ids, coords, labels = [], [], []
    extra = [c for c in header if c not in SITE_COLUMNS and c != label_column]
    covs = {c: [] for c in extra}
    pos = {c: header.index(c) for c in header}
    for lineno, row in rows:
        sid = row[pos["site_id"]]
        if sid in ids:
            raise DataError(f"{sites_path}:{lineno}: duplicated site_id {sid!r}")
        ids.append(sid)
        coords.append([_number(row[pos["x"]], sites_path, lineno, "x"),
                       _number(row[pos["y"]], sites_path, lineno, "y")])
        if label_column is not None:
            labels.append(row[pos[label_column]])
        for c in extra:
            covs[c].append(row[pos[c]])
    coords = np.array(coords)
    # extra columns are numeric covariates when every entry parses, else text
    numeric, text = {}, {}
    for c, vals in covs.items():
        try:
            numeric[c] = np.array([float(v) for v in vals])
        except ValueError:
            text[c] = list(vals)
    if np.unique(coords, axis=0).shape[0] != coords.shape[0]:
        raise DataError(f"{sites_path}: two sites share the same coordinates")

    oh, orows = _read_table(obs_path, OBS_COLUMNS)
    opos = {c: oh.index(c) for c in OBS_COLUMNS}
    site_pos = {s: j for j, s in enumerate(ids)}
    unknown = sorted({r[opos["site_id"]] for _, r in orows} - set(site_pos))
    if unknown:
        raise DataError(f"{obs_path}: unknown site_id(s) {unknown[:20]}")
    rep_ids = _order_ids(r[opos["replicate_id"]] for _, r in orows)
    rep_pos = {r: i for i, r in enumerate(rep_ids)}
    y = np.full((len(rep_ids), len(ids)), np.nan)
    seen = np.zeros(y.shape, dtype=np.int64)
    for lineno, row in orows:
        i = rep_pos[row[opos["replicate_id"]]]
        j = site_pos[row[opos["site_id"]]]
        if seen[i, j]:
            raise DataError(f"{obs_path}:{lineno}: duplicated observation for replicate "
                            f"{row[opos['replicate_id']]!r}, site {row[opos['site_id']]!r} "
                            f"(first at line {seen[i, j]})")
        seen[i, j] = lineno
        raw = row[opos["value"]]
        if raw.lower() in ("", "na", "nan"):
            continue
        v = _number(raw, obs_path, lineno, "value")
        if not np.isfinite(v):
            raise DataError(f"{obs_path}:{lineno}: value must be finite")
        y[i, j] = v

    rep_covs = {}
    if replicates_path is not None:
        rh, rrows = _read_table(replicates_path, ("replicate_id",))
        rpos = {c: rh.index(c) for c in rh}
        names = [c for c in rh if c != "replicate_id"]
        mat = np.full((len(rep_ids), len(names)), np.nan)
        for lineno, row in rrows:
            rid = row[rpos["replicate_id"]]
            if rid not in rep_pos:
                continue
            mat[rep_pos[rid]] = [_number(row[rpos[c]], replicates_path, lineno, c) for c in names]
        missing = [rep_ids[i] for i in np.flatnonzero(np.isnan(mat).any(axis=1))]
        if missing:
            raise DataError(f"{replicates_path}: no covariates for replicate(s) {missing[:20]}")
        rep_covs = {c: mat[:, k] for k, c in enumerate(names)}
    return Dataset(ids, coords, y, rep_ids, numeric,
                   np.array(labels) if label_column is not None else None, rep_covs,
                   site_text=text)


def standardize(ds: Dataset) -> Dataset:
    """Center each site at its median and divide by its 5%-95% quantile range."""
    if ds.standardization is not None:
        raise ConfigError("dataset is already standardized")
    center = np.nanmedian(ds.y, axis=0)
    spread = np.nanquantile(ds.y, 0.95, axis=0) - np.nanquantile(ds.y, 0.05, axis=0)
    flat = ~(spread > 0)
    if flat.any():
        logger.warning("sites %s have no spread between the 5%% and 95%% quantiles; "
                       "their scale factor is set to 1", [ds.site_ids[j] for j in np.flatnonzero(flat)])
        spread = np.where(flat, 1.0, spread)
    st = Standardization(center, spread)
    return replace(ds, y=st.forward(ds.y), standardization=st)


def thresholds(y, q: float) -> np.ndarray:
    """Per-site empirical ``q`` quantile (linear interpolation of order statistics)."""
    if not 0.0 < q < 1.0:
        raise ConfigError(f"threshold quantile must lie in (0, 1), got {q}")
    y = np.asarray(y, dtype=float)
    counts = np.isfinite(y).sum(axis=0)
    if np.any(counts < 2):
        raise DataError(f"sites {np.flatnonzero(counts < 2).tolist()} have fewer than two observations")
    low = np.flatnonzero(counts < MIN_THRESHOLD_OBS)
    if low.size:
        logger.warning("sites %s have fewer than %d observations; thresholds are unreliable",
                       low.tolist(), MIN_THRESHOLD_OBS)
    return np.nanquantile(y, q, axis=0, method="linear")


def design(ds: Dataset, formula: str) -> np.ndarray:
    """Design matrix from a comma-separated list of terms.

    Terms are ``1`` (intercept), ``x``/``y`` (coordinates), site covariate
    names, or replicate covariate names; ``a*b`` multiplies two terms. The
    result is ``(d, q)`` when only site-level terms appear, else ``(n, d, q)``.
    """
    terms = [t.strip() for t in formula.split(",") if t.strip()]
    if not terms:
        raise ConfigError("empty design formula")
    cols = [_term(ds, t) for t in terms]
    if all(c.ndim == 1 for c in cols):
        return np.column_stack(cols)
    full = [np.broadcast_to(c if c.ndim == 2 else c[None, :], (ds.n, ds.d)) for c in cols]
    return np.stack(full, axis=-1)


def _term(ds: Dataset, term: str) -> np.ndarray:
    if "*" in term:
        parts = [_term(ds, p.strip()) for p in term.split("*")]
        out = parts[0]
        for p in parts[1:]:
            if out.ndim == p.ndim:
                out = out * p
            else:
                a = out if out.ndim == 2 else out[None, :]
                b = p if p.ndim == 2 else p[None, :]
                out = a * b
        return out
    if term == "1":
        return np.ones(ds.d)
    if term in ("x", "y"):
        return ds.coords[:, 0 if term == "x" else 1].copy()
    if term in ds.site_covariates:
        return ds.site_covariates[term]
    if term in ds.replicate_covariates:
        return np.repeat(ds.replicate_covariates[term][:, None], ds.d, axis=1)
    if term in ds.site_text:
        raise ConfigError(f"site column {term!r} is not numeric and cannot enter a design")
    raise ConfigError(f"unknown design term {term!r}")
