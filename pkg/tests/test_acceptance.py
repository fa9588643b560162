"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

All stochastic criteria use the fixed master seed ``SEED``; it was chosen
before any of these tests were run and is not tuned.
"""

import json
import math
import time
import warnings

import numpy as np
from scipy.stats import chi2, chi2_contingency

from bpc import cli
from bpc.bayes import FLAT_PRIOR, PriorHyper, QuadratureControl, posterior_mcmc, \
    posterior_mean_quadrature, posterior_mode
from bpc.mle import finite_difference_hessian, log_likelihood, mle_fixed_point, observed_fim, \
    sufficient_stats
from bpc.sampling import SampleConfig, make_rng, sample_exact, sample_gibbs
from bpc.series import LambdaParams, j_dual_check, log_j_raw, pmf
from bpc.study import DESIGN_CHOICES, DESIGN_INITS, StudyConfig, default_workers, run_study
from conftest import ACCEPTANCE_RESULTS
from oracles import grid_mle

SEED = 1
GRID = [LambdaParams(a, b, c) for a in (0.5, 2.0, 3.5) for b in (0.5, 2.0, 3.5)
        for c in (0.35, 0.75, 1.0)]
TABLE_HYPER = PriorHyper(1.23, 2.325, 3.25, 2.528)


def record(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def draw(params, n, *stream):
    return sufficient_stats(sample_exact(params, SampleConfig(n=n), rng=make_rng(SEED, *stream)))


def test_normalization():
    t0 = time.perf_counter()
    x, y = np.meshgrid(np.arange(301), np.arange(301), indexing="ij")
    worst = max(abs(pmf(p, x, y).sum() - 1.0) for p in GRID)
    elapsed = time.perf_counter() - t0
    record("normalization", worst <= 1e-9 and elapsed < 10,
           f"max |sum pmf - 1| = {worst:.2e} over {len(GRID)} points (tol 1e-9), {elapsed:.1f}s (< 10s)")


def test_dual_series_identity():
    worst = max(abs(a - b) / a for a, b in map(j_dual_check, GRID))
    record("dual-series identity", worst <= 1e-12, f"max relative gap {worst:.2e} (tol 1e-12)")


def test_derivative_identities():
    J = lambda a, b, c: math.exp(log_j_raw(a, b, c))
    worst = 0.0
    for p in GRID:
        l1, l2, l3 = p.as_array()
        h = 1e-5
        fd = [
            (J(l1 * (1 + h), l2, l3) - J(l1 * (1 - h), l2, l3)) / (2 * h * l1),
            (J(l1, l2 * (1 + h), l3) - J(l1, l2 * (1 - h), l3)) / (2 * h * l2),
            (J(l1, l2, l3 * (1 + h)) - J(l1, l2, l3 * (1 - h))) / (2 * h * l3),
        ]
        exact = [J(l1, l2 * l3, l3), J(l1 * l3, l2, l3), l1 * l2 * J(l1 * l3, l2 * l3, l3)]
        worst = max(worst, max(abs(f - e) / e for f, e in zip(fd, exact)))
    record("derivative identities", worst <= 1e-6, f"max relative error {worst:.2e} (tol 1e-6)")


def test_mle_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for choice in (1, 2, 3, 4):
        for r in range(5):
            s = draw(DESIGN_CHOICES[choice], 50, 100, choice, r)
            fit = mle_fixed_point(s)
            worst = max(worst, np.abs(fit.estimate.as_array() - grid_mle(s)).max())
    elapsed = time.perf_counter() - t0
    record("MLE oracle equivalence", worst <= 1e-3 and elapsed < 300,
           f"max coordinate gap {worst:.2e} on 20 datasets (tol 1e-3), {elapsed:.1f}s (< 300s)")


def test_hessian_oracle():
    worst = 0.0
    pairs = [(choice, n) for choice in (1, 2, 3, 4) for n in (50, 100, 400)]
    for choice, n in pairs:
        p = DESIGN_CHOICES[choice]
        s = draw(p, n, 200, choice, n)
        fim = observed_fim(p, s)
        fd = -finite_difference_hessian(lambda v: log_likelihood(LambdaParams(*v), s, 0.0),
                                        p.as_array(), 1e-4)
        worst = max(worst, np.abs(fim - fd).max() / np.abs(fim).max())
    record("Hessian oracle", worst <= 1e-5,
           f"max relative error {worst:.2e} on {len(pairs)} (params, stats) pairs (tol 1e-5)")


def test_coverage_study_choice1():
    t0 = time.perf_counter()
    cfg = StudyConfig([DESIGN_CHOICES[1]], sample_sizes=(50, 100), replications=500,
                      bootstrap_B=200, master_seed=SEED, inits=[DESIGN_INITS[1]], labels=[1])
    res = run_study(cfg, workers=default_workers())
    elapsed = time.perf_counter() - t0
    c50, c100 = res.cells
    checks = {
        "Wald CP2 n=50": (c50.wald_cp[1], 0.952, 0.03),
        "Wald CP2 n=100": (c100.wald_cp[1], 0.959, 0.03),
        "Wald CP1 n=50": (c50.wald_cp[0], 0.950, 0.04),
        "Wald CP1 n=100": (c100.wald_cp[0], 0.935, 0.04),
        "boot CP2 n=50": (c50.boot_cp[1], 0.938, 0.04),
        "boot CP2 n=100": (c100.boot_cp[1], 0.935, 0.04),
    }
    ok = all(abs(v - target) <= tol for v, target, tol in checks.values())
    neg = max(c50.negative_variance_pct, c100.negative_variance_pct)
    ok &= neg < 15.0
    aw_ok = all(a > 0 for a in c50.wald_aw + c100.wald_aw)
    aw_ok &= all(b < a for a, b in zip(c50.wald_aw, c100.wald_aw))
    aw_ok &= all(b < a for a, b in zip(c50.boot_aw, c100.boot_aw))
    ok &= aw_ok and elapsed < 1800
    detail = "; ".join(f"{k} {v:.3f} (target {t} +- {tol})" for k, (v, t, tol) in checks.items())
    detail += f"; %neg {neg:.1f} (< 15); AW positive and shrinking: {aw_ok}"
    detail += f"; failures {c50.failures + c100.failures}; {elapsed:.0f}s (< 1800s)"
    record("coverage study (Choice 1)", ok, detail)


def test_flat_prior_consistency():
    worst = 0.0
    for r in range(10):
        choice = r % 4 + 1
        s = draw(DESIGN_CHOICES[choice], 100, 300, r)
        mode = posterior_mode(FLAT_PRIOR, s)
        fit = mle_fixed_point(s)
        worst = max(worst, np.abs(mode.lam.as_array() - fit.estimate.as_array()).max())
    record("flat-prior consistency", worst <= 1e-4,
           f"max |mode - MLE| {worst:.2e} on 10 datasets (tol 1e-4)")


MODE_TARGETS = {1: ((2.131, 2.522, 0.315), 0.35), 3: ((2.539, 1.487, 0.583), 0.5),
             4: ((3.601, 3.926, 0.743), 0.5)}


def test_posterior_mode_containment():
    rates = {}
    for choice, (target, tol) in MODE_TARGETS.items():
        hits = 0
        for r in range(50):
            s = draw(DESIGN_CHOICES[choice], 100, 400, choice, r)
            mode = posterior_mode(TABLE_HYPER, s).lam.as_array()
            hits += bool(np.all(np.abs(mode - np.array(target)) <= tol))
        rates[choice] = hits / 50
    ok = all(v >= 0.8 for v in rates.values())
    detail = ", ".join(f"Choice {c}: {v:.2f} within +-{MODE_TARGETS[c][1]}" for c, v in rates.items())
    record("conjugate posterior-mode containment", ok, detail + " (need >= 0.80 of 50 each)")


def test_quadrature_mcmc_agreement():
    zs = []
    configs = [(c, h) for c in (1, 2, 3, 4) for h in (TABLE_HYPER, FLAT_PRIOR)]
    for i, (choice, hyper) in enumerate(configs):
        s = draw(DESIGN_CHOICES[choice], 100, 500, i)
        qc = QuadratureControl(seed=SEED)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            q = posterior_mean_quadrature(hyper, s, qc)
            m = posterior_mcmc(hyper, s, qc)
        zs.append(np.abs(q.means - m.means) / m.mc_se)
    worst = float(np.max(zs))
    record("quadrature-MCMC agreement", worst <= 3.0,
           f"max |z| {worst:.2f} over {len(configs)} configurations x 3 means (tol 3)")


def test_sampler_validity():
    params = DESIGN_CHOICES[1]
    n = 200_000
    s = sample_exact(params, SampleConfig(n=n, seed=SEED))
    x, y = np.meshgrid(np.arange(15), np.arange(15), indexing="ij")
    expected = n * pmf(params, x, y)
    counts = np.zeros((15, 15))
    inside = (s.x < 15) & (s.y < 15)
    np.add.at(counts, (s.x[inside], s.y[inside]), 1)
    keep = expected >= 5
    obs = np.r_[counts[keep], n - counts[keep].sum()]
    exp = np.r_[expected[keep], n - expected[keep].sum()]
    stat = ((obs - exp) ** 2 / exp).sum()
    crit = chi2.ppf(0.999, obs.size - 1)

    g = sample_gibbs(params, SampleConfig(n=20_000, seed=SEED, burn_in=1000, thin=10))
    e = sample_exact(params, SampleConfig(n=20_000, seed=SEED + 1))
    cell = lambda d: np.minimum(d.x, 7) * 8 + np.minimum(d.y, 7)
    table = np.array([np.bincount(cell(g), minlength=64), np.bincount(cell(e), minlength=64)])
    table = table[:, table.sum(axis=0) >= 10]
    two_stat, _, dof, _ = chi2_contingency(table)
    two_crit = chi2.ppf(0.999, dof)

    r = np.corrcoef(s.x, s.y)[0, 1]
    se = (1 - r * r) / math.sqrt(n)
    ok = stat < crit and two_stat < two_crit and r < -4 * se
    record("sampler validity", ok,
           f"GOF {stat:.1f} < {crit:.1f}; Gibbs vs exact {two_stat:.1f} < {two_crit:.1f}; "
           f"corr {r:.3f} ({r / se:.0f} SE below 0)")


def test_end_to_end_report(tmp_path, capsys):
    js = tmp_path / "report.json"
    code = cli.main(["report", "--json", str(js), "--quiet", "--seed", str(SEED)])
    table = capsys.readouterr().out
    doc = json.loads(js.read_text())
    rows = doc["results"]["rows"]
    ok = (code == 0 and "Conjugate prior set-up" in table and "Locally uniform prior set-up" in table
          and len(rows) == 2 and all(r["self_check"]["within_3_se"] for r in rows))
    record("end-to-end CLI report on bundled synthetic data", ok,
           f"exit {code}, {len(rows)} prior rows, self-checks "
           f"{[r['self_check']['within_3_se'] for r in rows]}")
