import math

import numpy as np
import pytest
from scipy.optimize import brentq

from genbound.bounds import (
    BoundReport,
    CorollaryInputs,
    DegeneratePerturbation,
    SigmaSchedule,
    corollary1_bound,
    generic_output_bound,
    log_grid,
    optimize_sigma,
    sgld_bound,
    theorem1_bound,
    theorem3_bound,
)
from genbound.estimators import Estimate, cov_path_statistics, iso_path_statistics
from genbound.experiments import RATE_DEFAULTS, loglog_slope, rate_inputs
from genbound.numerics import Diagonal, Isotropic, RandomSource
from genbound.optimizer import StepSchedule, make_batch_schedule, run_sgd
from genbound.problems import LinearRegressionGaussian, QuadraticLoss, generate_dataset, population_gradient


def test_zero_path_terms_leave_delta():
    T = 5
    rep = theorem1_bound(np.zeros(T), np.zeros(T), Estimate(-0.3, 0.01, 10), SigmaSchedule.isotropic(0.1, T, 2),
                         np.full(T, 0.1), 1.0, 50)
    assert rep.info_term == 0.0 and rep.total == pytest.approx(0.3)
    assert rep.mi_bound == 0.0


def test_hand_computed_value():
    # T=2, eta=0.1, sigma=0.1, Gamma+V = [0.0025, 0.0025], R=1, n=100:
    # 4/100 * 1 * 0.005 = 2e-4 -> sqrt = 0.01414...; plus |Delta| = 0.1 - 0.01414
    T = 2
    gv = np.full(T, 0.00125)
    rep = theorem1_bound(gv, gv, 0.1 - math.sqrt(2e-4), SigmaSchedule.isotropic(0.1, T, 3), np.full(T, 0.1), 1.0, 100)
    assert rep.total == pytest.approx(0.1, rel=1e-12)
    assert rep.mi_bound == pytest.approx(2 * 0.01 / 0.01 * 0.005, rel=1e-12)
    assert rep.per_step[1].t == 2 and rep.per_step[0].contribution == pytest.approx(1e-4)


def test_monotone_in_gamma_and_v():
    T = 4
    sched = SigmaSchedule.isotropic(0.2, T, 2)
    base = theorem1_bound(np.ones(T), np.ones(T), 0.0, sched, np.full(T, 0.1), 1.0, 10).total
    assert theorem1_bound(2 * np.ones(T), np.ones(T), 0.0, sched, np.full(T, 0.1), 1.0, 10).total > base
    assert theorem1_bound(np.ones(T), 2 * np.ones(T), 0.0, sched, np.full(T, 0.1), 1.0, 10).total > base


def test_negative_estimates_are_floored_and_flagged():
    T = 3
    rep = theorem1_bound([-1e-9, 0.1, 0.1], np.zeros(T), 0.0, SigmaSchedule.isotropic(0.1, T, 1), np.full(T, 0.1), 1.0, 10)
    assert "floored-negative-gamma" in rep.flags


def test_degenerate_sigma_raises():
    T = 2
    with pytest.raises(DegeneratePerturbation):
        theorem1_bound(np.zeros(T), np.zeros(T), 0.0, SigmaSchedule.isotropic(0.0, T, 2), np.full(T, 0.1), 1.0, 10)
    with pytest.raises(DegeneratePerturbation):
        theorem3_bound(np.zeros(T), np.zeros(T), 0.0, SigmaSchedule.constant(Diagonal([1.0, 0.0]), T),
                       np.full(T, 0.1), 1.0, 10)
    with pytest.raises(DegeneratePerturbation):
        CorollaryInputs(1.0, 0.1, 5, 10, 1.0, 1.0, 1, 0.0, 2)


def test_theorem1_rejects_anisotropic():
    with pytest.raises(ValueError, match="isotropic"):
        theorem1_bound([0.0], [0.0], 0.0, SigmaSchedule.constant(Diagonal([1.0, 2.0]), 1), [0.1], 1.0, 10)


def test_corollary1_vanishes_without_smoothness_or_noise():
    rep = corollary1_bound(CorollaryInputs(R=1.0, eta=0.1, T=10, n=10, mu=0.0, v=0.0, b=1, sigma=0.3, d=4))
    assert rep.total == 0.0 and len(rep.per_step) == 10
    assert rep.extras["simplification"]["gamma_step_bound"] == "mu^2 d sigma^2 t"


def test_corollary1_steps_match_summary():
    inp = CorollaryInputs(R=0.5, eta=0.05, T=20, n=20, mu=2.0, v=1.5, b=1, sigma=0.2, d=3)
    with_rows = corollary1_bound(inp)
    without = corollary1_bound(inp, with_steps=False)
    assert math.sqrt(sum(r.contribution for r in with_rows.per_step)) == pytest.approx(with_rows.info_term, rel=1e-12)
    assert without.total == with_rows.total and without.per_step == []


def test_corollary1_dominates_theorem1_estimate():
    d, n = 3, 40
    spec = LinearRegressionGaussian(np.diag([2.0, 1.0, 0.5]), np.zeros(d), 0.5)
    model = QuadraticLoss(d)
    pg = population_gradient(model, spec)
    eta, s = 0.02, 0.05
    steps = StepSchedule.constant(eta, n)
    root = RandomSource(3)
    gam, v, dd, mus, v_max = [], [], [], [np.linalg.eigvalsh(spec.second_moment()).max()], 0.0
    for k in range(20):
        tr = root.child("trial", k)
        S = generate_dataset(spec, n, tr.child("train-data"))
        Sp = generate_dataset(spec, n, tr.child("test-data"))
        traj = run_sgd(model, S, steps, make_batch_schedule("single-pass-partition", n, 1, n, tr.child("b")), np.ones(d))
        ps = iso_path_statistics(traj, pg, np.full((1, n), s * s), model, S, Sp, 200, 200, tr.child("mc"))
        gam.append(ps.gamma[0])
        v.append(ps.v)
        dd.append(ps.delta_diff[0])
        v_max = max(v_max, ps.v.max())
        mus += [np.linalg.eigvalsh(D.X.T @ D.X / n).max() for D in (S, Sp)]
    sched = SigmaSchedule.isotropic(s, n, d)
    th1 = theorem1_bound(np.mean(gam, 0), np.mean(v, 0), np.mean(dd), sched, steps, 1.0, n)
    cor = corollary1_bound(CorollaryInputs(R=1.0, eta=eta, T=n, n=n, mu=max(mus), v=v_max, b=1, sigma=s, d=d))
    assert cor.total >= th1.total
    assert cor.info_term >= th1.info_term and cor.sensitivity_term >= th1.sensitivity_term


def _rate(regime, **over):
    p = {**RATE_DEFAULTS, **over}
    ns = [2**e for e in p["log2_n"]]
    return ns, [corollary1_bound(rate_inputs(regime, n, p), with_steps=False).total for n in ns]


def test_rate_slopes():
    assert loglog_slope(*_rate("small-batch")) == pytest.approx(-1 / 3, abs=0.05)
    assert loglog_slope(*_rate("large-batch")) == pytest.approx(-1 / 2, abs=0.05)


def test_large_batch_saturation():
    p = dict(RATE_DEFAULTS)
    for n in (2**10, 2**14, 2**20):
        sqrt_b = corollary1_bound(rate_inputs("large-batch", n, p), with_steps=False).total
        full = corollary1_bound(rate_inputs("large-batch", n, p, batch=n), with_steps=False).total
        assert 0 <= (sqrt_b - full) / sqrt_b < 0.05


def test_sgld_half_of_theorem1_info_at_equal_estimates():
    T = 6
    v = np.linspace(0.1, 0.6, T)
    sched = SigmaSchedule.isotropic(0.3, T, 2)
    etas = np.full(T, 0.05)
    a = sgld_bound(v, sched, etas, 0.5, 100)
    b = theorem1_bound(np.zeros(T), v, 0.0, sched, etas, 0.5, 100)
    assert a.info_term**2 / b.info_term**2 == pytest.approx(0.25, rel=1e-12)
    assert a.sensitivity_term == 0.0


def test_sgld_hand_formula():
    T, eta, s, R, n, vv = 8, 0.1, 0.2, 0.5, 50, 0.3
    rep = sgld_bound(np.full(T, vv), SigmaSchedule.isotropic(s, T, 1), np.full(T, eta), R, n)
    assert rep.total == pytest.approx(eta / s * math.sqrt(R * R * T * vv / n), rel=1e-12)


def test_theorem3_reduces_to_theorem1():
    d, n = 2, 25
    spec = LinearRegressionGaussian(np.diag([3.0, 1.0]), np.ones(d), 0.5)
    model = QuadraticLoss(d, clip=4.0)
    pg = population_gradient(model, spec)
    S, Sp = generate_dataset(spec, n, 0), generate_dataset(spec, n, 1)
    steps = StepSchedule.constant(0.05, n)
    traj = run_sgd(model, S, steps, make_batch_schedule("single-pass-partition", n, 1, n, 2), np.zeros(d))
    sigmas = [0.03, 0.3, 1.0]
    iso = iso_path_statistics(traj, pg, np.repeat(np.square(sigmas)[:, None], n, 1), model, S, Sp, 6, 30, RandomSource(4))
    scheds = [SigmaSchedule.isotropic(s, n, d) for s in sigmas]
    cs = cov_path_statistics(traj, pg, scheds, model, S, Sp, 6, 30, RandomSource(4))
    for g, (sch, c) in enumerate(zip(scheds, cs)):
        t1 = theorem1_bound(iso.gamma[g], iso.v, iso.delta_diff[g], sch, steps, 2.0, n)
        t3 = theorem3_bound(c.gamma, c.v, c.delta_diff, sch, steps, 2.0, n)
        assert abs(t3.total - t1.total) <= 1e-12 * t1.total


def test_generic_constant_output_is_zero():
    diffs = np.zeros((50, 3))
    grid = [Isotropic(s2, 3) for s2 in (0.1, 1.0)]
    rep = generic_output_bound(diffs, grid, [Estimate(0.0, 0.0, 10)] * 2, 0.5, 20)
    assert rep.total == 0.0 and rep.total_se == 0.0


def test_generic_inverse_sigma_law():
    diffs = np.random.default_rng(0).standard_normal((30, 4))
    sig = np.array([0.1, 0.3, 1.0, 3.0])
    rep = generic_output_bound(diffs, [Isotropic(s * s, 4) for s in sig], [0.0] * 4, 1.0, 10)
    first = np.array([c["first_term"] for c in rep.extras["curve"]])
    np.testing.assert_allclose(first * sig, first[0] * sig[0], rtol=1e-12)


def test_generic_input_checks():
    with pytest.raises(ValueError):
        generic_output_bound(np.zeros((1, 2)), [Isotropic(1.0, 2)], [0.0], 1.0, 10)
    with pytest.raises(ValueError):
        generic_output_bound(np.zeros((3, 2)), [Isotropic(1.0, 2)], [], 1.0, 10)


def test_optimize_singleton_and_min():
    rep = lambda v: BoundReport("x", v, 0.0, 0.0, 1.0, 1)  # noqa: E731
    p, r, _ = optimize_sigma(lambda s: rep((s - 0.3) ** 2), [0.5])
    assert p == 0.5 and r.total == pytest.approx(0.04)
    p, r, reports = optimize_sigma(lambda s: rep((s - 0.3) ** 2), [0.1, 0.3, 0.9])
    assert p == 0.3 and len(reports) == 3
    # ties favour the smaller perturbation
    p, _, _ = optimize_sigma(lambda s: rep(1.0), [0.9, 0.2])
    assert p == 0.2
    with pytest.raises(ValueError):
        optimize_sigma(lambda s: rep(0.0), [])


def test_corollary1_grid_minimizer_near_root():
    inp = dict(R=0.5, eta=0.01, T=100, n=100, mu=1.0, v=1.0, b=1, d=5)

    def total(s):
        return corollary1_bound(CorollaryInputs(sigma=s, **inp), with_steps=False).total

    h = 1e-7
    dtotal = lambda s: (total(s * (1 + h)) - total(s * (1 - h))) / (2 * s * h)  # noqa: E731
    root = brentq(dtotal, 1e-3, 10.0)
    grid = np.logspace(-3, 1, 1000)
    best, _, _ = optimize_sigma(lambda s: corollary1_bound(CorollaryInputs(sigma=s, **inp), with_steps=False), grid)
    cell = math.log(grid[1] / grid[0])
    assert abs(math.log(best / root)) <= cell


def test_report_round_trip():
    T = 3
    rep = theorem1_bound(np.ones(T), np.ones(T), Estimate(0.1, 0.01, 5), SigmaSchedule.isotropic(0.5, T, 2),
                         np.full(T, 0.1), 1.0, 10, delta_diff_alt=0.2)
    back = BoundReport.from_dict(rep.to_dict())
    assert back == rep
    assert rep.extras["delta_term_alt_convention"] == 0.2
    lines = rep.per_step_csv().splitlines()
    assert lines[0].startswith("t,eta,sigma2") and len(lines) == T + 1


def test_log_grid():
    g = log_grid(0.01, 10, 8)
    assert len(g) == 25 and g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(10)
    with pytest.raises(ValueError):
        log_grid(0.0, 1.0)


def test_schedule_cumulative_indexing():
    sched = SigmaSchedule.isotropic([0.1, 0.2, 0.3], 3, 2)
    assert sched.cumulative(1).is_zero
    assert sched.cumulative(3).s2 == pytest.approx(0.01 + 0.04)
    assert sched.final_cumulative.s2 == pytest.approx(0.14)
    with pytest.raises(IndexError):
        sched.cumulative(5)
