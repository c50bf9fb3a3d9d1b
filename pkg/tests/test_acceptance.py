"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (listed again in the terminal
summary under "acceptance criteria"). Criteria 5-7 read their Monte Carlo
replicates from the experiment cache and compute missing seeds on demand,
which takes hours on one core; see ``distextremes.experiments``.
"""
import math
import os
import pathlib
import time

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats

from conftest import grid, setting_one
from distextremes import experiments
from distextremes.errors import SupportError
from distextremes.diagnostics import annual_return_level, pit_values, site_uniformity
from distextremes.extremes_core import (
    DependenceParams, bivariate_density, censored_pair_terms, exponential_measure,
    exponential_measure_partials, pair_scale,
)
from distextremes.gmm_integrate import (
    StackedScores, average_mcles, block_weights, gmm_objective_oracle, meta_estimate,
    minimize_gmm_objective, sample_covariance, sandwich_covariance,
)
from distextremes.local_fit import (
    BlockData, block_ccl, block_kernels, block_score, block_sensitivity, fit_block,
)
from distextremes.partition import partition_custom, partition_grid
from distextremes.pipeline import FieldData, result_digest, run_pipeline, run_pipeline_svc
from distextremes.simulate import SimConfig, simulate_frechet_field
from distextremes.svc import BasisSpec, effective_dof, meta_estimate_svc

ROOT = pathlib.Path(__file__).resolve().parents[1]
os.environ.setdefault("DISTEXTREMES_CACHE", str(ROOT / ".mc_cache"))

Z95 = stats.norm.ppf(0.975)


def mp_V(x1, x2, a):
    lr = mpmath.log(x2 / x1)
    return mpmath.ncdf(a / 2 + lr / a) / x1 + mpmath.ncdf(a / 2 - lr / a) / x2


def mp_mixed(x1, x2, a):
    with mpmath.workdps(40):
        return float(mpmath.diff(lambda p, q: mpmath.exp(-mp_V(p, q, a)),
                                 (mpmath.mpf(x1), mpmath.mpf(x2)), (1, 1)))


def test_criterion_1_kernel_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pts = list(zip(rng.uniform(0.2, 20, 100), rng.uniform(0.2, 20, 100), rng.uniform(0.1, 5, 100)))
    homog = max(abs(exponential_measure(lam * x1, lam * x2, a) * lam / exponential_measure(x1, x2, a) - 1)
                for (x1, x2, a), lam in zip(pts, rng.uniform(0.1, 100, 100)))
    limit = max(abs(exponential_measure(x1, 1e12, a) - 1 / x1) for x1, _, a in pts)
    part = 0.0
    for x1, x2, a in pts:
        v1, v2, _ = exponential_measure_partials(x1, x2, a)
        h1, h2 = 1e-5 * x1, 1e-5 * x2
        fd1 = (exponential_measure(x1 + h1, x2, a) - exponential_measure(x1 - h1, x2, a)) / (2 * h1)
        fd2 = (exponential_measure(x1, x2 + h2, a) - exponential_measure(x1, x2 - h2, a)) / (2 * h2)
        # derivatives that underflow to zero are compared absolutely
        part = max(part, abs(v1 - fd1) / max(abs(fd1), 1e-12),
                   abs(v2 - fd2) / max(abs(fd2), 1e-12))
    dens = max(abs(bivariate_density(x1, x2, a) / mp_mixed(x1, x2, a) - 1)
               for x1, x2, a in zip(rng.uniform(0.3, 10, 50), rng.uniform(0.3, 10, 50),
                                    rng.uniform(0.2, 4, 50)))
    quad = 0.0
    for x1, a in [(0.7, 0.5), (1.0, 1.0), (3.0, 2.5), (8.0, 0.3)]:
        val, _ = integrate.quad(lambda x2: bivariate_density(x1, x2, a), 0, np.inf,
                                epsabs=1e-12, epsrel=1e-10, limit=200)
        quad = max(quad, abs(val / (x1 ** -2 * math.exp(-1 / x1)) - 1))
    # censored branches: both censored is -V, and integrating the joint density
    # over the censored coordinate reproduces the one-censored branch
    branch = 0.0
    for l1, l2, a in [(0.4, -0.3, 1.1), (-1.0, 0.8, 0.5), (1.5, 1.2, 2.0)]:
        branch = max(branch, abs(float(censored_pair_terms(l1, l2, a, False, False, False))
                                 + exponential_measure(math.exp(l1), math.exp(l2), a)))
        dens_fn = lambda x: math.exp(float(censored_pair_terms(  # noqa: E731
            math.log(x), l2, a, True, True, False)))
        val, _ = integrate.quad(dens_fn, 0, math.exp(l1), epsabs=1e-13, epsrel=1e-11, limit=200)
        cens = math.exp(float(censored_pair_terms(l1, l2, a, False, True, False)))
        branch = max(branch, abs(val / cens - 1))
    secs = time.perf_counter() - t0
    ok = (homog <= 1e-12 and limit <= 1e-6 and part <= 1e-5 and dens <= 1e-5 and quad <= 1e-4
          and branch <= 1e-6 and secs < 60)
    verdict(1, ok, f"homogeneity {homog:.1e}, marginal limit {limit:.1e}, partials {part:.1e}, "
                   f"density/mixed-FD {dens:.1e}, density/quadrature {quad:.1e}, "
                   f"branches {branch:.1e}, {secs:.0f}s")


def test_criterion_2_score(verdict):
    t0 = time.perf_counter()
    sites = grid(3)
    y = setting_one(sites, 60, seed=21)
    data = BlockData(sites, y, np.quantile(y, 0.8, axis=0), z1=sites)
    base = np.array([-0.4, 2.3, 0.5, 0.5, 1.5, 0.2])
    rng = np.random.default_rng(7)
    worst, used = 0.0, 0
    while used < 50:
        th = base + rng.normal(0, 0.15, 6) * np.r_[1, 1, 0.2, 0.2, 1, 0.3]
        if not np.isfinite(block_ccl(th, data)):
            continue
        g = block_score(th, data)
        for j in range(6):
            h = 1e-6 * (1 + abs(th[j]))
            up, dn = th.copy(), th.copy()
            up[j] += h
            dn[j] -= h
            fd = (block_ccl(up, data) - block_ccl(dn, data)) / (2 * h)
            worst = max(worst, abs(g[j] - fd) / max(abs(fd), 1e-8))
        used += 1
    secs = time.perf_counter() - t0
    verdict(2, worst <= 1e-4 and secs < 120,
            f"max relative score error {worst:.1e} over {used} points, {secs:.0f}s")


def test_criterion_3_single_block(verdict):
    sites = grid(4)
    y = setting_one(sites, 150, seed=21)
    field = FieldData(sites, y, np.quantile(y, 0.8, axis=0), z1=sites)
    res = run_pipeline(field, partition_custom(sites, ["all"] * 16))
    data = field.block(np.arange(16), 0)
    direct = fit_block(data)
    psi = block_kernels(direct.theta, data)
    I = block_sensitivity(direct.theta, data)
    C = sample_covariance(StackedScores.from_blocks([psi]))
    W = block_weights(C, (0, 6))
    godambe = np.linalg.inv(I.T @ np.linalg.solve(C, I)) / field.n
    meta_gap = np.abs(meta_estimate([direct.theta], [I], W) - direct.theta).max()
    sand_gap = np.abs(sandwich_covariance([I], W, C, field.n) / godambe - 1).max()
    pipe_gap = np.abs(res.theta_m - direct.theta).max()
    pipe_cov = np.abs(res.covariance / godambe - 1).max()
    tol = 1e-10
    verdict(3, max(meta_gap, pipe_gap) <= tol and max(sand_gap, pipe_cov) <= 1e-8,
            f"meta vs block {meta_gap:.1e}, sandwich vs Godambe {sand_gap:.1e} (rel), "
            f"pipeline vs direct {pipe_gap:.1e}, pipeline covariance {pipe_cov:.1e} (rel)")


def test_criterion_4_gmm_oracle(verdict):
    """Closed-form meta-estimate against a direct minimizer of the GMM objective.

    The objective uses the nonlinear block scores with the weights fixed at the
    averaged estimate, and the minimizer starts from that average. The closed
    form minimizes the objective after linearizing each score around its
    block estimate, so the two agree only up to the curvature of the scores;
    the linearized objective is checked as a control.
    """
    t0 = time.perf_counter()
    sites = np.array([(x, y) for x in (1.0, 2.0, 3.0, 4.0) for y in (1.0, 2.0)])
    part = partition_grid(sites, 4)
    assert part.K == 2
    tol = 1e-12
    gaps, gaps_se, lin_gaps, worse_than_average, infeasible = [], [], [], 0, 0
    for seed in range(10):
        y = setting_one(sites, 200, seed=1000 + seed)
        field = FieldData(sites, y, np.quantile(y, 0.8, axis=0), z1=sites)
        blocks = [field.block(idx, k) for k, idx in enumerate(part.blocks)]
        fits = [fit_block(b) for b in blocks]
        theta_c, _ = average_mcles([f.theta for f in fits])
        psis = [block_kernels(theta_c, b) for b in blocks]
        sens = [block_sensitivity(theta_c, b) for b in blocks]
        stacked = StackedScores.from_blocks(psis)
        C = sample_covariance(stacked)
        W = block_weights(C, stacked.offsets)
        tm = meta_estimate([f.theta for f in fits], sens, W)
        fns = [lambda t, b=b: block_score(t, b) for b in blocks]

        def objective(t):
            try:
                return gmm_objective_oracle(t, fns, W, field.n)
            except SupportError:
                return np.inf

        with np.errstate(all="ignore"):
            x, _ = minimize_gmm_objective(fns, W, field.n, theta_c, tol=tol)
            q_m, q_c = objective(tm), objective(theta_c)
        infeasible += not np.isfinite(q_m)
        worse_than_average += q_m > q_c
        se = np.sqrt(np.diag(sandwich_covariance(sens, W, C, field.n)))
        gaps.append(np.abs(x - tm).max())
        gaps_se.append((np.abs(x - tm) / se).max())
        lin = [lambda t, I=I, tk=f.theta: I @ (t - tk) for I, f in zip(sens, fits)]
        xl, _ = minimize_gmm_objective(lin, W, field.n, theta_c, tol=tol)
        # the optimizer stops on ftol first, so compare attained objective values
        q_lin = gmm_objective_oracle(tm, lin, W, field.n)
        lin_gaps.append((q_lin - gmm_objective_oracle(xl, lin, W, field.n)) / max(q_lin, 1.0))
    secs = time.perf_counter() - t0
    ok = max(gaps) <= 10 * tol and secs < 600
    verdict(4, ok, f"max |meta - direct minimizer| {max(gaps):.2e} (limit {10 * tol:.0e}); "
                   f"in SE units median {np.median(gaps_se):.1f}, max {max(gaps_se):.1f}; "
                   f"closed form outside the support in {infeasible}/10 and above the "
                   f"objective at the block average in {worse_than_average}/10; "
                   f"linearized control: closed form exceeds the optimizer's objective by at most "
                   f"{max(max(lin_gaps), 0.0):.1e} (rel); {secs:.0f}s")


def _study(kind, seeds, design):
    recs = experiments.study(kind, seeds, design)
    failed = [r["seed"] for r in recs if "error" in r]
    return [r for r in recs if "error" not in r], failed


def _natural_truth(theta0):
    return np.array(theta0, dtype=float)


@pytest.mark.slow
def test_criterion_5_stationary_study(verdict):
    design = experiments.StationaryDesign(block_size=25)
    recs, failed = _study("stationary", range(200), design)
    truth = _natural_truth(design.theta0)
    est = np.array([r["natural"] for r in recs])
    se = np.array([r["natural_se"] for r in recs])
    cover = (np.abs(est - truth) <= Z95 * se).mean(axis=0)
    bias = np.median(est - truth, axis=0)
    names = ["alpha", "phi", "beta11", "beta12", "beta2", "beta3"]
    ok = (not failed and np.all((cover >= 0.90) & (cover <= 0.99))
          and abs(bias[0]) <= 0.01 and np.all(np.abs(bias[2:]) <= 0.02))
    verdict(5, ok, f"{len(recs)} seeds ({len(failed)} failed); coverage "
                   + ", ".join(f"{n} {c:.3f}" for n, c in zip(names, cover))
                   + "; median bias " + ", ".join(f"{n} {b:+.4f}" for n, b in zip(names, bias)))


@pytest.mark.slow
def test_criterion_6_bias_versus_k(verdict):
    k4, f4 = _study("stationary", range(100), experiments.StationaryDesign(block_size=25))
    k1, f1 = _study("stationary", range(100), experiments.StationaryDesign(block_size=100))
    assert {r["K"] for r in k4} == {4} and {r["K"] for r in k1} == {1}
    truth = _natural_truth(experiments.StationaryDesign().theta0)
    common = sorted({r["seed"] for r in k4} & {r["seed"] for r in k1})
    e4 = np.array([r["natural"] for r in k4 if r["seed"] in common]) - truth
    e1 = np.array([r["natural"] for r in k1 if r["seed"] in common]) - truth
    parts, ok = [], len(common) == 100
    for j, name in ((0, "alpha"), (5, "beta3")):
        a1, a4 = np.abs(e1[:, j]), np.abs(e4[:, j])
        wins = int(np.sum(a1 >= a4))
        p = stats.binomtest(wins, len(common), 0.5, alternative="greater").pvalue
        med1, med4 = np.median(a1), np.median(a4)
        ok = ok and med1 >= med4 and p <= 0.05
        parts.append(f"{name}: median |error| K=1 {med1:.4f} vs K=4 {med4:.4f}, "
                     f"K=1 larger in {wins}/{len(common)}, sign-test p {p:.3f}")
    verdict(6, ok, "; ".join(parts))


def _svc_invariants():
    """GCV trace identity, penalty monotonicity and intercept-only nesting."""
    sites = grid(6)
    y = setting_one(sites, 200, seed=3, theta0=(1.0, 8.0, 0.0, 0.0, 0.5, 0.1))
    u = np.quantile(y, 0.8, axis=0)
    part = partition_grid(sites, 9)
    spec = BasisSpec.build(sites, part, count=2)
    flat = FieldData(sites, y, u)
    res = run_pipeline_svc(flat, part, spec, grid1=(0.0,), grid2=(0.0,))
    from distextremes.svc import layout_for, svc_block_data
    layout = layout_for(spec)
    blocks = [svc_block_data(sites[idx], y[:, idx], u[idx], spec.matrix(k, sites[idx]),
                             block_id=k) for k, idx in enumerate(part.blocks)]
    thetas = [np.asarray(t, dtype=float) for t in res.meta.theta_blocks]
    theta_c = res.meta.theta_c
    block_th = [layout.block_theta(theta_c, k) for k in range(layout.K)]
    psis = [block_kernels(t, b) for t, b in zip(block_th, blocks)]
    sens = [block_sensitivity(t, b) for t, b in zip(block_th, blocks)]
    stacked = StackedScores.from_blocks(psis)
    W = block_weights(sample_covariance(stacked), stacked.offsets)
    comb0 = meta_estimate_svc(thetas, sens, W, layout, 0.0, 0.0)
    trace_gap = abs(effective_dof(comb0) / layout.p_global - 1)
    eta = np.concatenate([np.r_[layout.eta1(k), layout.eta2(k)] for k in range(layout.K)])
    norms = [np.linalg.norm(meta_estimate_svc(thetas, sens, W, layout, lam, lam).theta[eta])
             for lam in (0.0, 0.01, 0.1, 1.0, 10.0)]
    monotone = bool(np.all(np.diff(norms) <= 1e-10 * norms[0]))
    one = partition_custom(sites, ["all"] * sites.shape[0])
    nest_svc = run_pipeline_svc(flat, one, BasisSpec.intercept_only(1))
    nest_stat = run_pipeline(flat, one)
    nest_gap = np.abs(nest_svc.meta.theta_m - nest_stat.theta_m).max()
    return trace_gap, monotone, nest_gap


@pytest.mark.slow
def test_criterion_7_svc(verdict):
    trace_gap, monotone, nest_gap = _svc_invariants()
    design = experiments.SvcDesign()
    recs, failed = _study("svc", range(100), design)
    truth = np.array([design.alpha, design.phi, design.xi])
    est = np.array([r["homogeneous"] for r in recs])
    se = np.array([r["homogeneous_se"] for r in recs])
    cover = (np.abs(est - truth) <= Z95 * se).mean(axis=0)
    aaed = np.array([r["aAED"] for r in recs]).mean(axis=0)
    ok = (trace_gap <= 1e-10 and monotone and nest_gap <= 1e-10 and not failed
          and aaed[0] <= 0.10 and np.all((cover >= 0.88) & (cover <= 0.99)))
    verdict(7, ok, f"trace identity gap {trace_gap:.1e} (rel), penalty monotone {monotone}, "
                   f"nesting gap {nest_gap:.1e}; {len(recs)} seeds ({len(failed)} failed): "
                   f"aAED1 {aaed[0]:.3f} (limit 0.10), aAED2 {aaed[1]:.3f}, coverage alpha "
                   f"{cover[0]:.2f}, phi {cover[1]:.2f}, xi {cover[2]:.2f}")


def test_criterion_8_simulator(verdict):
    t0 = time.perf_counter()
    dep = DependenceParams.from_natural(0.8, 10.0)
    sites = np.array([[0.0, 0.0], [4.0, 3.0], [12.0, 0.0], [3.0, 9.0], [20.0, 20.0]])
    x = simulate_frechet_field(SimConfig(sites, 5000, dep, seed=8))
    d = sites.shape[0]
    ks = np.array([stats.kstest(x[:, j], stats.invweibull(1).cdf).pvalue for j in range(d)])
    worst_z = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            h = np.hypot(*(sites[i] - sites[j]))
            want = 2 * stats.norm.cdf(pair_scale(h, dep.alpha, dep.phi) / 2)
            inv = 1.0 / np.maximum(x[:, i], x[:, j])
            est = 1.0 / inv.mean()
            worst_z = max(worst_z, abs(est - want) / (est / np.sqrt(inv.size)))
    small = grid(3)
    runs = [simulate_frechet_field(SimConfig(small, 60, dep, seed=5, workers=w)) for w in (1, 2, 3)]
    same = all(np.array_equal(runs[0], r) for r in runs[1:])
    secs = time.perf_counter() - t0
    # family-wise level 0.01 over the sites
    ok = ks.min() > 0.01 / d and worst_z < 3 and same and secs < 300
    verdict(8, ok, f"site KS p-values min {ks.min():.3f} (Bonferroni level {0.01 / d:.3f}), "
                   f"extremal coefficients within {worst_z:.2f} SE, worker-independent {same}, "
                   f"{secs:.0f}s")


def test_criterion_9_diagnostics(verdict):
    # the desk-scale stationary design; at n=100 the estimated weights are too
    # noisy for the fitted margins to be trusted
    sites = experiments.grid_sites(10)
    y = setting_one(sites, 500, seed=77)
    field = FieldData(sites, y, np.quantile(y, 0.8, axis=0), z1=sites)
    res = run_pipeline(field, partition_grid(sites, 25))
    th = res.theta_m
    mu = sites @ th[2:4]
    u, flag = pit_values(y, mu, np.exp(th[4]), th[5])
    _, p_site = site_uniformity(u)
    level = annual_return_level(1.0, 1.0, 1.0, 50)
    closed = -12 / math.log(0.98)
    levels = [annual_return_level(0.3, 1.2, 0.1, r) for r in (1.5, 2, 5, 10, 50, 100, 1000)]
    mono = bool(np.all(np.diff(levels) > 0))
    ok = p_site > 0.01 and abs(level - closed) <= 1e-6 and mono and not np.any(flag)
    verdict(9, ok, f"PIT per-site KS Bonferroni p {p_site:.3f} over {np.isfinite(u).sum()} values, "
                   f"return level {level:.6f} vs {closed:.6f}, monotone in r {mono}")
