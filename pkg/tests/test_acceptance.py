"""Acceptance criteria, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line that is printed in the
terminal summary. Criteria 1 and 2 share one full Monte Carlo grid run
(about ten minutes on a single core).
"""

import csv
import dataclasses
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import factor_panel
from mosc.cli import main
from mosc.estimator import estimate_effects, fit_synthetic_control
from mosc.inference import permutation_test, reject_at_alpha
from mosc.panel import write_covariates, write_panel
from mosc.prep import MatchSpec
from mosc.sim import (
    SIM_ALPHA,
    DgpConfig,
    EstimatorKind,
    default_jobs,
    replicate_draw,
    run_grid,
    table1_cells,
)
from mosc.solver import solve_simplex_ls
from oracles import grid_objective

pytestmark = pytest.mark.slow

SEED = 1
REPS = 2000
ARMS = ("conventional_raw", "multi_demeaned:1", "multi_demeaned:3", "multi_demeaned:10")

# Published reference table: (d, T0) -> per arm (pre-fit, bias, sd, rej)
TABLE1 = {
    (1.0, 5): [(1.65, 1.94, 2.91, 0.10), (0.51, 1.43, 1.81, 0.10), (0.82, 1.32, 1.67, 0.10), (0.99, 1.22, 1.54, 0.10)],
    (1.0, 10): [(1.63, 1.64, 2.47, 0.10), (0.83, 1.27, 1.61, 0.10), (1.04, 1.19, 1.50, 0.10), (1.14, 1.12, 1.40, 0.10)],
    (1.0, 20): [(1.62, 1.52, 2.36, 0.10), (1.03, 1.18, 1.49, 0.10), (1.15, 1.11, 1.41, 0.10), (1.20, 1.08, 1.36, 0.10)],
    (0.5, 5): [(0.44, 1.10, 1.40, 0.36), (0.23, 1.16, 1.47, 0.32), (0.56, 1.08, 1.36, 0.15), (0.77, 1.01, 1.26, 0.12)],
    (0.5, 10): [(0.71, 1.03, 1.29, 0.24), (0.54, 1.08, 1.35, 0.19), (0.80, 1.01, 1.26, 0.14), (0.91, 0.95, 1.18, 0.12)],
    (0.5, 20): [(0.86, 0.95, 1.20, 0.17), (0.77, 0.99, 1.25, 0.15), (0.92, 0.92, 1.16, 0.12), (0.99, 0.89, 1.11, 0.10)],
    (0.0, 5): [(0.24, 1.05, 1.32, 0.57), (0.15, 1.09, 1.37, 0.48), (0.48, 1.04, 1.31, 0.19), (0.71, 0.99, 1.23, 0.13)],
    (0.0, 10): [(0.54, 0.98, 1.23, 0.34), (0.45, 1.03, 1.29, 0.25), (0.72, 0.96, 1.20, 0.15), (0.86, 0.90, 1.13, 0.13)],
    (0.0, 20): [(0.73, 0.92, 1.16, 0.23), (0.68, 0.96, 1.21, 0.18), (0.86, 0.90, 1.13, 0.14), (0.93, 0.87, 1.09, 0.12)],
}


def _verdict(report, number, title, failures, detail=""):
    status = "PASS" if not failures else "FAIL"
    line = f"criterion {number} {status}: {title}"
    if detail:
        line += f" ({detail})"
    if failures:
        line += " | " + "; ".join(failures)
    report(line)
    return failures


@pytest.fixture(scope="module")
def grid():
    cells = table1_cells() + [(1.0, 50, EstimatorKind.parse("multi_demeaned:10"))]
    out = run_grid(cells, REPS, seed=SEED, jobs=default_jobs())
    return {(s.d, s.T0, s.estimator): s for s in out}


def test_criterion_1_grid_replication(grid, acceptance_report):
    failures = []
    for (d, t0), ref in TABLE1.items():
        for arm, (pre, bias, sd, rej) in zip(ARMS, ref):
            s = grid[(d, t0, arm)]
            checks = (
                ("pre-fit", s.pre_fit, pre, 0.08),
                ("bias", s.bias, bias, max(0.08, 3 * s.bias_mcse)),
                ("SD", s.sd, sd, max(0.15, 3 * s.sd_mcse)),
                ("rej", s.rej, rej, 0.03),
            )
            for name, got, want, tol in checks:
                if abs(got - want) > tol + 1e-12:
                    failures.append(f"d={d:g} T0={t0} {arm} {name} {got:.3f} vs {want:.2f} (tol {tol:.3f})")
    _verdict(acceptance_report, 1, f"reference grid replication, 36 cells x 4 statistics at {REPS} reps", failures)
    assert not failures


def test_criterion_2_convergence(grid, acceptance_report):
    failures = []
    for t0 in (5, 10, 20):
        seq = [grid[(1.0, t0, f"multi_demeaned:{k}")] for k in (1, 3, 10)]
        for a, b in zip(seq, seq[1:]):
            if b.bias > a.bias + 2 * np.hypot(a.bias_mcse, b.bias_mcse):
                failures.append(f"T0={t0}: bias {a.estimator} {a.bias:.3f} < {b.estimator} {b.bias:.3f}")
    for k in (1, 3, 10):
        seq = [grid[(1.0, t0, f"multi_demeaned:{k}")] for t0 in (5, 10, 20)]
        for a, b in zip(seq, seq[1:]):
            if b.bias > a.bias + 2 * np.hypot(a.bias_mcse, b.bias_mcse):
                failures.append(f"K={k}: bias T0={a.T0} {a.bias:.3f} < T0={b.T0} {b.bias:.3f}")
    lim = grid[(1.0, 50, "multi_demeaned:10")]
    if not 0.75 <= lim.bias <= 0.85:
        failures.append(f"T0=50 K=10 bias {lim.bias:.3f} outside [0.75, 0.85]")
    if not 0.95 <= lim.sd <= 1.05:
        failures.append(f"T0=50 K=10 SD {lim.sd:.3f} outside [0.95, 1.05]")
    _verdict(acceptance_report, 2, "bias falls along K and T0 and reaches the half-normal limit", failures)
    assert not failures


def test_criterion_3_solver_oracle(acceptance_report):
    failures = []
    elapsed = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        J, rows = int(rng.integers(2, 4)), int(rng.integers(4, 21))
        A, b = rng.normal(size=(rows, J)), rng.normal(size=rows)
        t = time.perf_counter()
        out = solve_simplex_ls(A, b)
        elapsed += time.perf_counter() - t
        ref, _ = grid_objective(A, b, 0.001)
        w = out.weights
        if abs(out.objective - ref) > 1e-4 * (1 + out.objective):
            failures.append(f"seed {seed}: {out.objective:.6g} vs grid {ref:.6g}")
        if not ((w >= 0).all() and abs(w.sum() - 1.0) <= 1e-10):
            failures.append(f"seed {seed}: weights leave the simplex")
    if elapsed >= 10.0:
        failures.append(f"solver time {elapsed:.1f}s")
    _verdict(acceptance_report, 3, "solver matches grid oracle on 100 instances", failures, f"{elapsed:.2f}s")
    assert not failures


def test_criterion_4_perfect_donor(acceptance_report):
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = factor_panel(seed=seed, n_units=int(rng.integers(4, 15)), n_outcomes=int(rng.integers(1, 4)))
        donor = int(rng.integers(1, p.n_units))
        v = p.values.copy()
        v[0] = v[donor]
        p = dataclasses.replace(p, values=v)
        fit = fit_synthetic_control(p, MatchSpec(p.outcomes, p.cutoff))
        w = fit.weight_of(p.units[donor])
        if w < 0.999 or fit.pooled_pre_rmspe >= 1e-6:
            failures.append(f"seed {seed}: weight {w:.6f}, pre-RMSPE {fit.pooled_pre_rmspe:.2e}")
    _verdict(acceptance_report, 4, "perfect donor on 50 panels", failures)
    assert not failures


def test_criterion_5_level_invariance(acceptance_report):
    failures = []
    p = factor_panel(seed=55, n_units=12, n_outcomes=3, covariates=2)
    shift = np.random.default_rng(55).uniform(-100, 100, (p.n_units, 1, 3))
    q = dataclasses.replace(p, values=p.values + shift)
    spec = MatchSpec(p.outcomes, p.cutoff, use_covariates=True)
    g0 = estimate_effects(p, fit_synthetic_control(p, spec)).gap
    g1 = estimate_effects(q, fit_synthetic_control(q, spec)).gap
    dg = float(np.abs(g1 - g0).max())
    if dg > 1e-10:
        failures.append(f"treated gap moved by {dg:.2e}")
    r0, r1 = permutation_test(p, spec), permutation_test(q, spec)
    dp = float(np.abs(r1.gaps - r0.gaps).max())
    if dp > 1e-10:
        failures.append(f"placebo gap moved by {dp:.2e}")
    if not (np.array_equal(r0.rank, r1.rank) and np.array_equal(r0.rank_t, r1.rank_t)):
        failures.append("permutation ranks changed")
    _verdict(acceptance_report, 5, "demeaning removes unit-outcome levels", failures, f"max gap change {max(dg, dp):.1e}")
    assert not failures


def test_criterion_6_permutation_size(acceptance_report):
    config = DgpConfig(T0=10, d=1.0, K=10, seed=SEED)
    spec = EstimatorKind("multi_demeaned", 10).spec(config)
    ranks, rejects = [], []
    for rep in range(REPS):
        res = permutation_test(replicate_draw(config, rep).panel, spec, alpha=SIM_ALPHA)
        ranks.append(res.treated_rank(0))
        rejects.append(reject_at_alpha(res))
    counts = np.bincount(ranks, minlength=config.n_units + 1)[1:]
    pval = float(chisquare(counts).pvalue)
    rej = float(np.mean(rejects))
    failures = []
    if pval < 0.01:
        failures.append(f"chi-square p {pval:.4f}")
    if not 0.08 <= rej <= 0.12:
        failures.append(f"rejection {rej:.3f} outside [0.08, 0.12]")
    _verdict(acceptance_report, 6, "treated rank uniform under zero effect", failures, f"chi-square p={pval:.3f}, rej={rej:.3f}")
    assert not failures


def test_criterion_7_backdating(tmp_path, acceptance_report):
    p = factor_panel(seed=77, n_units=20, n_periods=20, n_outcomes=3, cutoff=14, noise=0.2)
    v = p.values.copy()
    v[0, 14:, :] += 5.0
    p = dataclasses.replace(p, values=v)
    write_panel(p, tmp_path / "panel.csv")
    out = tmp_path / "placebo"
    code = main(
        ["placebo", "--panel", str(tmp_path / "panel.csv"), "--treated", "u0", "--cutoff", p.cutoff,
         "--placebo-cutoff", "2011", "--out", str(out)]
    )
    assert code == 0
    gaps = list(csv.DictReader(open(out / "gaps.csv")))
    weights = np.array([float(r["weight"]) for r in csv.DictReader(open(out / "weights.csv"))])
    placebo = np.array([float(r["gap"]) for r in gaps if r["window"] == "placebo"])
    post = np.array([float(r["gap"]) for r in gaps if r["window"] == "post"])
    ratio = np.abs(placebo).mean() / np.abs(post).mean()
    # noise-only standard deviation of the mean post gap: each gap carries the
    # treated noise plus the weighted donor noise
    se = 0.2 * np.sqrt(1 + weights @ weights) / np.sqrt(post.size)
    failures = []
    if ratio >= 0.2:
        failures.append(f"placebo/post mean |gap| {ratio:.3f}")
    if abs(post.mean() - 5.0) > 2 * se:
        failures.append(f"post mean gap {post.mean():.3f} vs 5.0 (2 sd = {2 * se:.3f})")
    _verdict(
        acceptance_report, 7, "backdated placebo window stays quiet", failures,
        f"ratio {ratio:.3f}, post mean {post.mean():.3f}",
    )
    assert not failures


def test_criterion_8_determinism(tmp_path, acceptance_report):
    p = factor_panel(seed=88, n_units=12, n_outcomes=3, covariates=2)
    write_panel(p, tmp_path / "panel.csv")
    write_covariates(p, tmp_path / "cov.csv")
    data = ["--panel", str(tmp_path / "panel.csv"), "--covariates", str(tmp_path / "cov.csv"),
            "--treated", "u0", "--cutoff", p.cutoff, "--seed", "8"]
    commands = {
        "fit": ["fit", *data],
        "permute": ["permute", *data],
        "placebo": ["placebo", *data, "--placebo-cutoff", "2005"],
        "validate": ["validate", *data],
        "simulate": ["simulate", "--reps", "3", "--seed", "8"],
    }
    failures = []
    for name, argv in commands.items():
        dirs = []
        for jobs in (1, 8):
            d = tmp_path / f"{name}-{jobs}"
            if main([*argv, "--jobs", str(jobs), "--out", str(d)]) != 0:
                failures.append(f"{name} jobs={jobs} failed")
            dirs.append(d)
        files = sorted(f.name for f in dirs[0].iterdir())
        if files != sorted(f.name for f in dirs[1].iterdir()):
            failures.append(f"{name}: file sets differ")
        for f in files:
            if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes():
                failures.append(f"{name}/{f} differs")
    _verdict(acceptance_report, 8, "byte-identical outputs for jobs 1 and 8", failures, f"{len(commands)} subcommands")
    assert not failures
