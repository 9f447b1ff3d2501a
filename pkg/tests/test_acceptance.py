"""Acceptance criteria 1-12, one test each; every test prints a PASS/FAIL line."""

import math
import os
import time

import numpy as np

from genbound.artifacts import emit
from genbound.bounds import corollary1_bound
from genbound.config import ExperimentConfig, default_config
from genbound.estimators import MCConfig, estimate_delta, estimate_gamma, estimate_variance
from genbound.experiments import COMMANDS, RATE_DEFAULTS, RunContext, loglog_slope, rate_inputs
from genbound.kl_lab import DiscreteLaw, lemma_check, quadrature_kl
from genbound.numerics import Isotropic, RandomSource
from genbound.optimizer import StepSchedule, make_batch_schedule, run_perturbed_path, run_sgd
from genbound.problems import (
    LinearRegressionGaussian,
    LogisticLoss,
    LogisticTwoGaussians,
    QuadraticLoss,
    generate_dataset,
    population_gradient,
)

THREADS = max(1, os.cpu_count() or 1)


def _cfg(kind, **over):
    data = default_config(kind).to_dict()
    data.update(over)
    return ExperimentConfig.from_dict(data)


def test_c01_point_mass_equality(criterion):
    start = time.perf_counter()
    worst = 0.0
    for s in (0.5, 1.0, 2.0):
        for x, y in [(0.0, 3.0), (1.0, -0.5), (-1.2, -0.2), (0.4, 0.45), (2.0, -1.0)]:
            kl = quadrature_kl(DiscreteLaw.point(x), DiscreteLaw.point(y), Isotropic(s * s, 1))
            exact = (x - y) ** 2 / (2 * s * s)
            worst = max(worst, abs(kl - exact) / exact)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 1.0
    criterion(1, ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_c02_kl_coupling_inequality(criterion):
    start = time.perf_counter()
    reps = [lemma_check(50, d=d, rng=RandomSource(2024).child("d", d), tol=1e-6) for d in (1, 2)]
    elapsed = time.perf_counter() - start
    inst = [i for r in reps for i in r.instances]
    violations = sum(len(r.violations) for r in reps)
    dominated = all(i.independent_bound >= i.optimal_bound for i in inst)
    ok = len(inst) == 100 and violations == 0 and dominated and elapsed < 30
    criterion(2, ok, f"{len(inst)} instances, {violations} violations, min slack "
                     f"{min(i.slack for i in inst):.3g}, {elapsed:.1f}s")
    assert ok


def test_c03_gamma_closed_form(criterion):
    start = time.perf_counter()
    d = 5
    spec = LinearRegressionGaussian(np.diag(np.linspace(0.5, 2.5, d)), np.ones(d), 1.0)
    pg = population_gradient(QuadraticLoss(d), spec)
    A = spec.second_moment()
    zs = []
    for s2 in (0.01, 0.1, 1.0):
        est = estimate_gamma(pg, np.linspace(-1, 1, d), Isotropic(s2, d), None, MCConfig(10_000),
                             RandomSource(3).child(s2))
        zs.append(abs(est.value - s2 * np.sum(A * A)) / est.std_error)
    elapsed = time.perf_counter() - start
    ok = max(zs) <= 3 and elapsed < 10
    criterion(3, ok, f"max |z| {max(zs):.2f}, {elapsed:.2f}s")
    assert ok


def test_c04_delta_closed_form(criterion):
    start = time.perf_counter()
    d = 4
    spec = LinearRegressionGaussian(np.diag([3.0, 2.0, 1.0, 0.5]), np.ones(d), 1.0)
    ds = generate_dataset(spec, 100, RandomSource(4))
    H = ds.X.T @ ds.X / ds.n
    zs = []
    for s2 in (0.01, 0.1, 1.0):
        est = estimate_delta(QuadraticLoss(d), np.zeros(d), ds, Isotropic(s2, d), MCConfig(10_000),
                             RandomSource(5).child(s2))
        zs.append(abs(est.value + 0.5 * s2 * np.trace(H)) / est.std_error)
    elapsed = time.perf_counter() - start
    ok = max(zs) <= 3 and elapsed < 10
    criterion(4, ok, f"max |z| {max(zs):.2f}, {elapsed:.2f}s")
    assert ok


def test_c05_variance_scaling(criterion):
    start = time.perf_counter()
    spec = LogisticTwoGaussians(2.0, 1.0)
    model = LogisticLoss(2, clip=1.0)
    pg = population_gradient(model, spec, "quadrature")
    w = np.array([0.5, -0.3])
    batches = (1, 2, 4, 8)
    vals = [estimate_variance(model, pg, w, b, spec=spec, k=20_000, rng=RandomSource(6).child(b)).value for b in batches]
    ratios = [v * b / vals[0] for b, v in zip(batches, vals)]
    elapsed = time.perf_counter() - start
    ok = all(abs(r - 1) <= 0.10 for r in ratios) and elapsed < 30
    criterion(5, ok, "b*V_b/V_1 = " + ", ".join(f"{r:.3f}" for r in ratios) + f", {elapsed:.1f}s")
    assert ok


def test_c06_theorem1_validity(criterion):
    start = time.perf_counter()
    cfg = _cfg("bound-vs-gap", n_values=[100, 400], trials=200)
    art = COMMANDS["bound-vs-gap"](cfg, RunContext(threads=THREADS))
    elapsed = time.perf_counter() - start
    res = art.summary["results"]
    grid = min(r["grid_points"] for r in res)
    bad = sum(r["violations"] for r in res)
    ok = bad == 0 and grid >= 20 and elapsed < 600
    detail = "; ".join(f"n={r['n']}: gap {r['gap']:.4f}, best bound {r['best_bound']:.4f} at sigma {r['best_sigma']:.3g}"
                       for r in res)
    criterion(6, ok, f"{grid} sigma points, {bad} violations; {detail}; {elapsed:.0f}s")
    assert ok


def test_c07_sgld_validity(criterion):
    start = time.perf_counter()
    cfg = _cfg("sgd-vs-sgld", n_values=[100, 400], trials=200)
    art = COMMANDS["sgd-vs-sgld"](cfg, RunContext(threads=THREADS))
    elapsed = time.perf_counter() - start
    rows = art.tables["comparison"]
    sgld_ok = rows.column("sgld_valid")
    ok = len(set(rows.column("sigma"))) == 3 and all(sgld_ok) and elapsed < 600
    criterion(7, ok, f"{sum(sgld_ok)}/{len(sgld_ok)} (n, sigma) cells valid, {elapsed:.0f}s")
    assert ok


def test_c08_rate_scan(criterion):
    start = time.perf_counter()
    p = dict(RATE_DEFAULTS)
    ns = [2**e for e in p["log2_n"]]
    slopes = {}
    for regime in ("small-batch", "large-batch"):
        slopes[regime] = loglog_slope(ns, [corollary1_bound(rate_inputs(regime, n, p), with_steps=False).total for n in ns])
    improve = []
    for n in ns:
        a = corollary1_bound(rate_inputs("large-batch", n, p), with_steps=False).total
        b = corollary1_bound(rate_inputs("large-batch", n, p, batch=n), with_steps=False).total
        improve.append((a - b) / a)
    elapsed = time.perf_counter() - start
    ok = (abs(slopes["small-batch"] + 1 / 3) <= 0.05 and abs(slopes["large-batch"] + 0.5) <= 0.05
          and max(improve) < 0.05 and elapsed < 1.0)
    criterion(8, ok, f"slopes {slopes['small-batch']:.4f} / {slopes['large-batch']:.4f}, "
                     f"max b=n improvement {max(improve):.4f}, {elapsed:.3f}s")
    assert ok


def test_c09_theorem3_reduction(criterion):
    start = time.perf_counter()
    cfg = _cfg("aniso-compare", params={"refine": 0, "reduction_check": True})
    art = COMMANDS["aniso-compare"](cfg, RunContext(threads=THREADS))
    elapsed = time.perf_counter() - start
    s = art.summary
    ok = s["theorem3_reduction_max_rel_diff"] <= 1e-12 and s["diagonal_le_isotropic"] and elapsed < 60
    criterion(9, ok, f"reduction rel diff {s['theorem3_reduction_max_rel_diff']:.2e}, diagonal min "
                     f"{s['diagonal_min']:.4f} vs isotropic {s['isotropic_family_min_weighted']:.4f}, {elapsed:.1f}s")
    assert ok


def test_c10_perturbed_path_identity(criterion):
    start = time.perf_counter()
    gen = np.random.default_rng(10)
    worst, exact = 0.0, True
    for k in range(100):
        d = int(gen.integers(1, 5))
        n = int(gen.integers(5, 40))
        spec = LinearRegressionGaussian(np.diag(gen.uniform(0.5, 2, d)), gen.standard_normal(d), 0.5)
        ds = generate_dataset(spec, n, RandomSource(k))
        T = int(gen.integers(1, 60))
        b = make_batch_schedule("with-replacement", n, 1, T, RandomSource(k).child("b"))
        traj = run_sgd(QuadraticLoss(d), ds, StepSchedule.constant(float(gen.uniform(0.01, 0.2)), T), b,
                       gen.standard_normal(d))
        sig = [Isotropic(float(v), d) for v in gen.uniform(0.001, 0.5, T)]
        pert = run_perturbed_path(traj, sig, RandomSource(k).child("p"))
        cum = np.vstack([np.zeros(d), np.cumsum(pert.noise, axis=0)])
        worst = max(worst, float(np.max(np.linalg.norm(pert.iterates - traj.iterates - cum, axis=1))))
        zero = run_perturbed_path(traj, [Isotropic(0.0, d)] * T, RandomSource(k))
        exact &= zero.iterates.tobytes() == traj.iterates.tobytes()
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and exact and elapsed < 10
    criterion(10, ok, f"max deviation {worst:.2e}, zero-noise bit-exact {exact}, {elapsed:.2f}s")
    assert ok


def test_c11_generic_bound(criterion):
    start = time.perf_counter()
    const = COMMANDS["generic-bound"](_cfg("generic-bound", optimizer={"eta": 0.0}), RunContext(threads=THREADS))
    curve = const.tables["generic_curve"]
    zs = [t / se if se > 0 else (0.0 if t == 0 else math.inf) for t, se in zip(curve.column("total"), curve.column("total_se"))]
    first_zero = max(curve.column("first_term")) == 0.0
    law = COMMANDS["generic-bound"](default_config("generic-bound"), RunContext(threads=THREADS))
    dev = law.summary["inverse_sigma_law_max_rel_dev"]
    elapsed = time.perf_counter() - start
    ok = max(zs) <= 3 and first_zero and dev <= 1e-12 and elapsed < 60
    criterion(11, ok, f"constant output: max total/SE {max(zs):.2f} over {len(zs)} sigmas; "
                      f"1/sigma law rel dev {dev:.2e}, {elapsed:.1f}s")
    assert ok


def test_c12_thread_determinism(criterion, tmp_path):
    cfg = default_config("bound-vs-gap")
    files = {}
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        emit(COMMANDS["bound-vs-gap"](cfg, RunContext(threads=threads)), out)
        files[threads] = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".json", ".csv")
                          and p.name != "timing.json"}
    same = files[1] == files[8]
    ok = same and "summary.json" in files[1] and any(n.endswith(".csv") for n in files[1])
    criterion(12, ok, f"{len(files[1])} files compared, identical={same}")
    assert ok
