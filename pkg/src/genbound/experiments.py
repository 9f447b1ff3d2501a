"""Experiment commands. Each ``cmd_*`` takes an ExperimentConfig and returns a RunArtifact.

Randomness comes from ``root.child("n", n, "trial", k).child(purpose)``, so a
trial's draws do not depend on the worker that runs it. Results are reduced
in trial order.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .artifacts import RunArtifact, Table
from .bounds import (
    PER_STEP_COLUMNS,
    BoundReport,
    CorollaryInputs,
    SigmaSchedule,
    corollary1_bound,
    generic_output_bound,
    sgld_bound,
    theorem1_bound,
    theorem3_bound,
)
from .config import ConfigError, ExperimentConfig
from .estimators import (
    Estimate,
    TrialDivergence,
    cov_path_statistics,
    diag_path_statistics,
    iso_path_statistics,
    trial_mean,
)
from .kl_lab import lemma_check
from .numerics import Diagonal, Isotropic, RandomSource
from .optimizer import DivergenceError, init_params, make_batch_schedule, run_sgd, run_sgld
from .problems import NoAnalyticGradient, empirical_loss, generate_dataset

__all__ = [
    "RunContext",
    "cmd_bound_vs_gap",
    "cmd_rate_scan",
    "cmd_sgd_vs_sgld",
    "cmd_aniso_compare",
    "cmd_kl_verify",
    "cmd_generic_bound",
    "COMMANDS",
    "estimate_seconds",
]

STEP_TABLE_COLUMNS = ("n", "bound", "schedule") + PER_STEP_COLUMNS


@dataclass
class RunContext:
    threads: int = 1
    dump_trajectory: bool = False


def _pmap(fn, items, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def clean(obj):
    """Convert numpy scalars/arrays inside ``obj`` to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _report_dict(rep: BoundReport) -> dict:
    d = rep.to_dict()
    d.pop("per_step")
    return clean(d)


def _add_steps(table: Table, n: int, rep: BoundReport, bound: str):
    for row in rep.per_step:
        table.add(n=n, bound=bound, schedule=rep.schedule, **{c: getattr(row, c) for c in PER_STEP_COLUMNS})


# ----------------------------------------------------------------- task set-up


@dataclass
class Task:
    spec: object
    model: object
    popgrad: object
    R: float


def _task(cfg: ExperimentConfig, need_popgrad: bool = True) -> Task:
    spec = cfg.problem.build_spec()
    model = cfg.problem.build_model(spec.dim)
    R = model.R
    if R is None:
        raise ConfigError("missing subgaussian constant R for an unbounded loss (set loss.clip or loss.subgaussian_R)")
    popgrad = None
    if need_popgrad:
        try:
            popgrad = cfg.problem.build_popgrad(model, spec, cfg.source())
        except NoAnalyticGradient as err:
            raise ConfigError(f"{err}; choose popgrad mode 'plug-in'") from err
    return Task(spec, model, popgrad, float(R))


@dataclass
class TrialSetup:
    source: RandomSource
    S: object
    S_prime: object
    steps: object
    batches: object
    w1: np.ndarray


def _setup(cfg: ExperimentConfig, task: Task, n: int, k: int) -> TrialSetup:
    src = cfg.source().child("n", n, "trial", k)
    m_test = n if cfg.test_mode == "fresh-S-prime" else int(cfg.n_test or 100 * n)
    S = generate_dataset(task.spec, n, src.child("train-data"))
    S_prime = generate_dataset(task.spec, m_test, src.child("test-data"))
    opt = cfg.optimizer
    steps = opt.step_schedule(n)
    batches = make_batch_schedule(opt.batch_kind, n, opt.batch_size, steps.T, src.child("batches"))
    w1 = init_params(task.model.dim, opt.init, opt.init_sd, src.child("init"))
    return TrialSetup(src, S, S_prime, steps, batches, w1)


def _sgd(task, st: TrialSetup, k: int, S=None):
    try:
        return run_sgd(task.model, st.S if S is None else S, st.steps, st.batches, st.w1, st.source.child("algorithm"))
    except DivergenceError as err:
        raise TrialDivergence(k, err.step) from err


def _gap_of(task, w, st: TrialSetup):
    train = empirical_loss(task.model, w, st.S)
    test = empirical_loss(task.model, w, st.S_prime)
    return train, test, test - train


def _validity(gap: Estimate, total: float, total_se: float):
    combined = math.hypot(gap.std_error, total_se)
    return abs(gap.value) <= total + 2 * combined, combined


def _dump(cfg, ctx, trajectories) -> dict:
    if not ctx.dump_trajectory:
        return {}
    return {"trajectories.json": json.dumps(clean(trajectories)) + "\n"}


def _theorem1_over_grid(stats, sigmas, etas, R, n):
    """Pathwise-bound reports for each grid sigma from per-trial iso statistics (trial order)."""
    gamma = np.stack([s["gamma"] for s in stats])  # (K, G, T)
    v = np.stack([s["v"] for s in stats])  # (K, T)
    dd = np.stack([s["dd"] for s in stats])  # (K, G)
    dd_alt = np.stack([s["dd_alt"] for s in stats])
    g_mean, g_se = trial_mean(gamma)
    v_mean, v_se = trial_mean(v)
    T = etas.size
    reports = []
    for g, sigma in enumerate(sigmas):
        sched = SigmaSchedule.constant(Isotropic(float(sigma) ** 2, stats[0]["dim"]), T)
        coef = (4 * R * R / n) * etas**2 / sigma**2
        X = (gamma[:, g, :] + v) @ coef
        reports.append(theorem1_bound(
            g_mean[g], v_mean, Estimate.from_samples(dd[:, g]), sched, etas, R, n,
            gamma_se=g_se[g], v_se=v_se, info_sum_se=Estimate.from_samples(X).std_error,
            delta_diff_alt=float(dd_alt[:, g].mean()),
        ))
    return reports


def _iso_stats(task, traj, st, step_s2, cfg):
    ps = iso_path_statistics(traj, task.popgrad, step_s2, task.model, st.S, st.S_prime,
                             cfg.mc.m_gamma, cfg.mc.m_delta, st.source.child("perturb"))
    return {"gamma": ps.gamma, "v": ps.v, "dd": ps.delta_diff, "dd_alt": ps.delta_diff_alt,
            "dim": traj.iterates.shape[1]}


# ------------------------------------------------------------------ bound-vs-gap


def cmd_bound_vs_gap(cfg: ExperimentConfig, ctx: Optional[RunContext] = None) -> RunArtifact:
    """Fresh-data SGD trials, measured gap, and the pathwise SGD bound over the sigma grid."""
    ctx = ctx or RunContext()
    task = _task(cfg)
    sigmas = cfg.sigma_grid.values_array()
    curve = Table(["n", "sigma", "bound_total", "info_term", "delta_term", "gap", "gap_se",
                   "total_se", "mi_bound", "delta_term_alt", "valid"])
    per_trial = Table(["n", "trial", "train_loss", "test_loss", "gap"])
    per_step = Table(list(STEP_TABLE_COLUMNS))
    results, reports, dumps = [], [], {}
    for n in cfg.n_values:
        T = cfg.optimizer.steps_for(n)
        step_s2 = np.repeat((sigmas**2)[:, None], T, axis=1)

        def trial(k, n=n, step_s2=step_s2):
            st = _setup(cfg, task, n, k)
            traj = _sgd(task, st, k)
            out = _iso_stats(task, traj, st, step_s2, cfg)
            out["train"], out["test"], out["gap"] = _gap_of(task, traj.final, st)
            if k == 0 and ctx.dump_trajectory:
                out["traj"] = traj.to_dict()
            return out

        stats = _pmap(trial, range(cfg.trials), ctx.threads)
        if ctx.dump_trajectory:
            dumps[str(n)] = stats[0].get("traj")
        for k, s in enumerate(stats):
            per_trial.add(n=n, trial=k, train_loss=s["train"], test_loss=s["test"], gap=s["gap"])
        gap = Estimate.from_samples([s["gap"] for s in stats])
        etas = cfg.optimizer.step_schedule(n).etas
        reps = _theorem1_over_grid(stats, sigmas, etas, task.R, n)
        violations = 0
        for sigma, rep in zip(sigmas, reps):
            ok, _ = _validity(gap, rep.total, rep.total_se)
            violations += not ok
            curve.add(n=n, sigma=float(sigma), bound_total=rep.total, info_term=rep.info_term,
                      delta_term=rep.sensitivity_term, gap=gap.value, gap_se=gap.std_error,
                      total_se=rep.total_se, mi_bound=rep.mi_bound,
                      delta_term_alt=rep.extras["delta_term_alt_convention"], valid=bool(ok))
        best = min(range(len(reps)), key=lambda i: (reps[i].total, sigmas[i], i))
        _add_steps(per_step, n, reps[best], "theorem1")
        reports.append(_report_dict(reps[best]))
        results.append({"n": n, "T": int(T), "gap": gap.value, "gap_se": gap.std_error,
                        "best_sigma": float(sigmas[best]), "best_bound": reps[best].total,
                        "best_bound_se": reps[best].total_se, "grid_points": int(sigmas.size),
                        "violations": violations})
    all_valid = all(r["violations"] == 0 for r in results)
    summary = {"results": results, "all_valid": all_valid,
               "note": "evaluation losses are clipped when a clip range is configured; training gradients follow loss.train_on_clipped"}
    art = RunArtifact("bound-vs-gap", cfg.to_dict(), clean(summary), reports,
                      {"curve": curve, "per_trial": per_trial, "per_step": per_step})
    art.attachments = _dump(cfg, ctx, dumps)
    art.exit_code = 0 if all_valid else 4
    return art


# --------------------------------------------------------------------- rate-scan

RATE_DEFAULTS = {"regimes": ["small-batch", "large-batch"], "log2_n": list(range(10, 21)),
                 "R": 0.5, "mu": 1.0, "v": 1.0, "d": 10, "c_eta": 1.0, "c_sigma": 1.0, "saturation": True}


def rate_inputs(regime: str, n: int, p: dict, batch: Optional[int] = None) -> CorollaryInputs:
    """Closed-form inputs for one n. The small-batch noise level is the variance sigma^2 = c n^(-4/3)."""
    if regime == "small-batch":
        T, b, eta, sigma = n, 1, p["c_eta"] / n, math.sqrt(p["c_sigma"] * n ** (-4.0 / 3.0))
    elif regime == "large-batch":
        root = math.sqrt(n)
        T, b, eta, sigma = max(1, round(root)), max(1, round(root)), p["c_eta"] / root, p["c_sigma"] / root
    else:
        raise ConfigError(f"unknown rate regime {regime!r}")
    if batch is not None:
        b = batch
    return CorollaryInputs(R=p["R"], eta=eta, T=T, n=n, mu=p["mu"], v=p["v"], b=b, sigma=sigma, d=int(p["d"]))


def loglog_slope(ns, values) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)[0])


def cmd_rate_scan(cfg: ExperimentConfig, ctx: Optional[RunContext] = None) -> RunArtifact:
    """Smooth-loss closed-form bound over an n grid with a least-squares log-log slope per regime."""
    p = {**RATE_DEFAULTS, **cfg.params}
    unknown = set(p) - set(RATE_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown rate-scan params: {sorted(unknown)}")
    ns = [2**int(e) for e in p["log2_n"]]
    if len(ns) < 4:
        raise ConfigError("rate scan needs an n grid of at least 4 points")
    table = Table(["regime", "n", "T", "b", "eta", "sigma", "bound_total", "info_term", "sensitivity_term"])
    slopes, reports = {}, []
    for regime in p["regimes"]:
        totals = []
        for n in ns:
            rep = corollary1_bound(rate_inputs(regime, n, p), with_steps=False)
            inp = rep.extras["inputs"]
            table.add(regime=regime, n=n, T=inp["T"], b=inp["b"], eta=inp["eta"], sigma=inp["sigma"],
                      bound_total=rep.total, info_term=rep.info_term, sensitivity_term=rep.sensitivity_term)
            totals.append(rep.total)
        slopes[regime] = loglog_slope(ns, totals)
        reports.append(_report_dict(rep))
    summary = {"n_grid": ns, "slopes": slopes, "constants": {k: p[k] for k in ("R", "mu", "v", "d", "c_eta", "c_sigma")}}
    if p["saturation"] and "large-batch" in p["regimes"]:
        improvements = []
        for n in ns:
            base = corollary1_bound(rate_inputs("large-batch", n, p), with_steps=False)
            full = corollary1_bound(rate_inputs("large-batch", n, p, batch=n), with_steps=False)
            inp = full.extras["inputs"]
            table.add(regime="large-batch-full-batch", n=n, T=inp["T"], b=inp["b"], eta=inp["eta"], sigma=inp["sigma"],
                      bound_total=full.total, info_term=full.info_term, sensitivity_term=full.sensitivity_term)
            improvements.append(1.0 - full.total / base.total)
        summary["saturation_improvement"] = improvements
        summary["saturation_max_improvement"] = max(improvements)
    return RunArtifact("rate-scan", cfg.to_dict(), clean(summary), reports, {"rate": table})


# ------------------------------------------------------------------- sgd-vs-sgld


def cmd_sgd_vs_sgld(cfg: ExperimentConfig, ctx: Optional[RunContext] = None) -> RunArtifact:
    """Paired SGD/SGLD trials on shared data and batches, one SGLD run per fixed noise level."""
    ctx = ctx or RunContext()
    task = _task(cfg)
    sigmas = cfg.sigma_grid.values_array()
    comp = Table(["n", "sigma", "sgd_train", "sgld_train", "train_diff", "train_diff_se", "sgd_gap", "sgd_gap_se",
                  "sgld_gap", "sgld_gap_se", "theorem1_total", "theorem1_se", "sgld_total", "sgld_se",
                  "sgd_valid", "sgld_valid"])
    per_trial = Table(["n", "trial", "algorithm", "sigma", "train_loss", "test_loss", "gap"])
    per_step = Table(list(STEP_TABLE_COLUMNS))
    results, reports = [], []
    violations = 0
    for n in cfg.n_values:
        T = cfg.optimizer.steps_for(n)
        step_s2 = np.repeat((sigmas**2)[:, None], T, axis=1)

        def trial(k, n=n, step_s2=step_s2):
            st = _setup(cfg, task, n, k)
            traj = _sgd(task, st, k)
            out = _iso_stats(task, traj, st, step_s2, cfg)
            out["train"], out["test"], out["gap"] = _gap_of(task, traj.final, st)
            sg = []
            for g, sigma in enumerate(sigmas):
                noise = [Isotropic(float(sigma) ** 2, task.model.dim)] * T
                try:
                    lt = run_sgld(task.model, st.S, st.steps, st.batches, noise, st.w1, st.source.child("sgld-noise", g))
                except DivergenceError as err:
                    raise TrialDivergence(k, err.step) from err
                v = np.sum((lt.grads - task.popgrad(lt.iterates[:T])) ** 2, axis=1)
                sg.append((*_gap_of(task, lt.final, st), v))
            out["sgld"] = sg
            return out

        stats = _pmap(trial, range(cfg.trials), ctx.threads)
        etas = cfg.optimizer.step_schedule(n).etas
        t1 = _theorem1_over_grid(stats, sigmas, etas, task.R, n)
        sgd_gap = Estimate.from_samples([s["gap"] for s in stats])
        for k, s in enumerate(stats):
            per_trial.add(n=n, trial=k, algorithm="sgd", sigma=0.0, train_loss=s["train"], test_loss=s["test"], gap=s["gap"])
            for g, sigma in enumerate(sigmas):
                tr, te, gp, _ = s["sgld"][g]
                per_trial.add(n=n, trial=k, algorithm="sgld", sigma=float(sigma), train_loss=tr, test_loss=te, gap=gp)
        for g, sigma in enumerate(sigmas):
            v = np.stack([s["sgld"][g][3] for s in stats])
            v_mean, v_se = trial_mean(v)
            sched = SigmaSchedule.constant(Isotropic(float(sigma) ** 2, task.model.dim), T)
            X = v @ ((task.R**2 / n) * etas**2 / sigma**2)
            rep = sgld_bound(v_mean, sched, etas, task.R, n, v_se=v_se, info_sum_se=Estimate.from_samples(X).std_error)
            gap = Estimate.from_samples([s["sgld"][g][2] for s in stats])
            diff = Estimate.from_samples([s["sgld"][g][0] - s["train"] for s in stats])
            ok_sgld, _ = _validity(gap, rep.total, rep.total_se)
            ok_sgd, _ = _validity(sgd_gap, t1[g].total, t1[g].total_se)
            violations += (not ok_sgld) + (not ok_sgd)
            comp.add(n=n, sigma=float(sigma), sgd_train=float(np.mean([s["train"] for s in stats])),
                     sgld_train=float(np.mean([s["sgld"][g][0] for s in stats])), train_diff=diff.value,
                     train_diff_se=diff.std_error, sgd_gap=sgd_gap.value, sgd_gap_se=sgd_gap.std_error,
                     sgld_gap=gap.value, sgld_gap_se=gap.std_error, theorem1_total=t1[g].total,
                     theorem1_se=t1[g].total_se, sgld_total=rep.total, sgld_se=rep.total_se,
                     sgd_valid=bool(ok_sgd), sgld_valid=bool(ok_sgld))
            _add_steps(per_step, n, rep, "sgld")
            reports.append(_report_dict(rep))
            # equal-estimate comparison: pathwise SGD info term with Gamma = 0 and the same V
            t1_same = theorem1_bound(np.zeros(T), v_mean, None, sched, etas, task.R, n)
            results.append({"n": n, "sigma": float(sigma), "sgld_bound": rep.total, "theorem1_bound": t1[g].total,
                            "sgld_gap": gap.value, "info_ratio_at_equal_estimates":
                            rep.info_term / t1_same.info_term if t1_same.info_term > 0 else None})
    summary = {"results": results, "violations": violations, "all_valid": violations == 0}
    art = RunArtifact("sgd-vs-sgld", cfg.to_dict(), clean(summary), reports,
                      {"comparison": comp, "per_trial": per_trial, "per_step": per_step})
    art.exit_code = 0 if violations == 0 else 4
    return art


# ----------------------------------------------------------------- aniso-compare

ANISO_DEFAULTS = {"refine": 0, "reduction_check": True}


def _cell_of(values: np.ndarray, x: float) -> int:
    return int(np.argmin(np.abs(np.log(values) - math.log(x))))


def cmd_aniso_compare(cfg: ExperimentConfig, ctx: Optional[RunContext] = None) -> RunArtifact:
    """Isotropic versus diagonal constant-covariance families under the weighted bound."""
    ctx = ctx or RunContext()
    p = {**ANISO_DEFAULTS, **cfg.params}
    if set(p) - set(ANISO_DEFAULTS):
        raise ConfigError(f"unknown aniso-compare params: {sorted(set(p) - set(ANISO_DEFAULTS))}")
    if cfg.problem.loss.get("kind") != "quadratic":
        raise ConfigError("aniso-compare needs the quadratic loss")
    task = _task(cfg)
    d = task.model.dim
    sigmas = cfg.sigma_grid.values_array()
    refine = int(p["refine"])
    fine = None
    if refine > 1:
        lo, hi = math.log10(sigmas[0]), math.log10(sigmas[-1])
        fine = np.logspace(lo, hi, refine * (sigmas.size - 1) + 1)
    grids = {"coarse": np.array(list(itertools.product(sigmas, repeat=d)))}
    if fine is not None:
        grids["fine"] = np.array(list(itertools.product(fine, repeat=d)))
    n = cfg.n_values[0]
    T = cfg.optimizer.steps_for(n)
    etas = cfg.optimizer.step_schedule(n).etas
    R = task.R
    iso_scheds = [SigmaSchedule.constant(Isotropic(float(s) ** 2, d), T) for s in sigmas]
    step_s2 = np.repeat((sigmas**2)[:, None], T, axis=1)

    def trial(k):
        st = _setup(cfg, task, n, k)
        traj = _sgd(task, st, k)
        out = {"gap": _gap_of(task, traj.final, st)[2]}
        perturb = st.source.child("perturb")
        out.update(_iso_stats(task, traj, st, step_s2, cfg))
        if p["reduction_check"]:
            cs = cov_path_statistics(traj, task.popgrad, iso_scheds, task.model, st.S, st.S_prime,
                                     cfg.mc.m_gamma, cfg.mc.m_delta, perturb)
            out["cov_gamma"] = np.stack([c.gamma for c in cs])
            out["cov_v"] = np.stack([c.v for c in cs])
            out["cov_dd"] = np.array([c.delta_diff for c in cs])
        for name, grid in grids.items():
            ds = diag_path_statistics(traj, task.popgrad, grid**2, task.model, st.S, st.S_prime,
                                      cfg.mc.m_gamma, cfg.mc.m_delta, perturb)
            out[name] = {"X": (ds.gamma + ds.v) @ etas**2, "dd": ds.delta_diff}
            if name == "coarse":
                out["coarse_full"] = (ds.gamma, ds.v)
        return out

    stats = _pmap(trial, range(cfg.trials), ctx.threads)
    gap = Estimate.from_samples([s["gap"] for s in stats])
    t1 = _theorem1_over_grid(stats, sigmas, etas, R, n)

    reduction = None
    if p["reduction_check"]:
        cg, cv = np.stack([s["cov_gamma"] for s in stats]), np.stack([s["cov_v"] for s in stats])
        cdd = np.stack([s["cov_dd"] for s in stats])
        rel = []
        for g, sched in enumerate(iso_scheds):
            gm, gse = trial_mean(cg[:, g])
            vm, vse = trial_mean(cv[:, g])
            X = (cg[:, g] + cv[:, g]) @ ((4 * R * R / n) * etas**2)
            r3 = theorem3_bound(gm, vm, Estimate.from_samples(cdd[:, g]), sched, etas, R, n, gse, vse,
                                Estimate.from_samples(X).std_error)
            rel.append(abs(r3.total - t1[g].total) / abs(t1[g].total))
        reduction = max(rel)

    def family(name):
        X = np.stack([s[name]["X"] for s in stats])  # (K, G)
        dd = np.stack([s[name]["dd"] for s in stats])
        totals = np.sqrt(4 * R * R / n * X.mean(axis=0)) + np.abs(dd.mean(axis=0))
        return X, dd, totals

    Xc, ddc, totals = family("coarse")
    grid = grids["coarse"]
    iso_mask = np.all(grid == grid[:, :1], axis=1)
    table = Table(["family", "sigma_1", "sigma_2", "bound_total", "isotropic"])
    for g, row in enumerate(grid):
        table.add(family="coarse", sigma_1=float(row[0]), sigma_2=float(row[-1]), bound_total=float(totals[g]),
                  isotropic=bool(iso_mask[g]))
    key = lambda i: (totals[i], float(np.sum(grid[i] ** 2)), i)  # noqa: E731
    best = min(range(len(grid)), key=key)
    iso_best = min(np.flatnonzero(iso_mask), key=key)

    gam, vv = (np.stack([s["coarse_full"][i] for s in stats]) for i in (0, 1))
    gm, gse = trial_mean(gam[:, best])
    vm, vse = trial_mean(vv[:, best])
    sched = SigmaSchedule.constant(Diagonal(grid[best] ** 2), T)
    diag_rep = theorem3_bound(gm, vm, Estimate.from_samples(ddc[:, best]), sched, etas, R, n, gse, vse,
                              Estimate.from_samples(Xc[:, best] * 4 * R * R / n).std_error)
    iso_t1 = min(t1, key=lambda r: r.total)
    per_step = Table(list(STEP_TABLE_COLUMNS))
    _add_steps(per_step, n, diag_rep, "theorem3-diagonal")
    _add_steps(per_step, n, iso_t1, "theorem1-isotropic")

    summary = {
        "n": n, "T": int(T), "gap": gap.value, "gap_se": gap.std_error,
        "isotropic_min": iso_t1.total, "isotropic_min_sigma": math.sqrt(iso_t1.per_step[0].sigma2),
        "isotropic_family_min_weighted": float(totals[iso_best]),
        "diagonal_min": diag_rep.total, "diagonal_min_sigmas": grid[best].tolist(),
        "diagonal_le_isotropic": bool(totals[best] <= totals[iso_best]),
        "theorem3_reduction_max_rel_diff": reduction,
    }
    if fine is not None:
        _, _, ftot = family("fine")
        fg = grids["fine"]
        fbest = min(range(len(fg)), key=lambda i: (ftot[i], float(np.sum(fg[i] ** 2)), i))
        step = math.log(sigmas[1] / sigmas[0])
        offsets = np.abs(np.log(fg[fbest]) - np.log(grid[best])) / step
        summary.update({"refined_min": float(ftot[fbest]), "refined_min_sigmas": fg[fbest].tolist(),
                        "refined_offset_cells": offsets.tolist(),
                        "refined_within_one_cell": bool(np.all(offsets <= 1.0 + 1e-9))})
    art = RunArtifact("aniso-compare", cfg.to_dict(), clean(summary),
                      [_report_dict(diag_rep), _report_dict(iso_t1)], {"grid": table, "per_step": per_step})
    return art


# --------------------------------------------------------------------- kl-verify

KL_DEFAULTS = {"trials": None, "d": [1, 2], "sigma_range": [0.3, 3.0], "point_masses": False, "full_cov": False,
               "tol": 1e-6, "spread": 2.0, "inject_violation": False}


def cmd_kl_verify(cfg: ExperimentConfig, ctx: Optional[RunContext] = None) -> RunArtifact:
    """Random discrete instances: smoothed KL against the coupling bounds."""
    p = {**KL_DEFAULTS, **cfg.params}
    if set(p) - set(KL_DEFAULTS):
        raise ConfigError(f"unknown kl-verify params: {sorted(set(p) - set(KL_DEFAULTS))}")
    dims = p["d"] if isinstance(p["d"], list) else [p["d"]]
    trials = int(cfg.trials if p["trials"] is None else p["trials"])
    if any(d not in (1, 2) for d in dims) or trials < 1:
        raise ConfigError("kl-verify needs d in {1, 2} and at least one trial")
    share = [trials // len(dims) + (i < trials % len(dims)) for i in range(len(dims))]
    table = Table(["instance_id", "d", "kl", "independent_bound", "optimal_bound", "slack", "quad_error", "cov"])
    violations, offset = [], 0
    for i, (d, count) in enumerate(zip(dims, share)):
        rep = lemma_check(count, d, tuple(p["sigma_range"]), cfg.source().child("kl", d), point_masses=p["point_masses"],
                          full_cov=p["full_cov"], tol=p["tol"], spread=p["spread"],
                          inject_violation=bool(p["inject_violation"]) and i == 0)
        for inst in rep.instances:
            table.add(instance_id=offset + inst.instance_id, d=d, kl=inst.kl, independent_bound=inst.independent_bound,
                      optimal_bound=inst.optimal_bound, slack=inst.slack, quad_error=inst.quad_error, cov=inst.cov)
        violations += [offset + v for v in rep.violations]
        offset += count
    slack = table.column("slack")
    summary = {"instances": trials, "violations": violations, "ok": not violations,
               "min_slack": min(slack), "max_quad_error": max(table.column("quad_error"))}
    art = RunArtifact("kl-verify", cfg.to_dict(), clean(summary), [], {"lemma": table})
    art.exit_code = 0 if not violations else 4
    return art


# ----------------------------------------------------------------- generic-bound


def cmd_generic_bound(cfg: ExperimentConfig, ctx: Optional[RunContext] = None) -> RunArtifact:
    """Output-perturbation bound from paired runs on independent datasets, next to the pathwise SGD bound."""
    ctx = ctx or RunContext()
    task = _task(cfg)
    sigmas = cfg.sigma_grid.values_array()
    n = cfg.n_values[0]
    T = cfg.optimizer.steps_for(n)
    etas = cfg.optimizer.step_schedule(n).etas
    d = task.model.dim
    step_s2 = np.repeat((sigmas**2)[:, None], T, axis=1)

    def trial(k):
        st = _setup(cfg, task, n, k)
        traj = _sgd(task, st, k)
        twin = _sgd(task, st, k, S=st.S_prime)  # same batches and init, independent data
        out = _iso_stats(task, traj, st, step_s2, cfg)
        out["diff"] = traj.final - twin.final
        out["grad_sqdiff"] = np.sum((traj.grads - twin.grads) ** 2, axis=1)
        z = st.source.child("perturb", "output").generator().standard_normal((cfg.mc.m_delta, d))
        sym = []
        for sigma in sigmas:
            xi = sigma * z
            a = [empirical_loss(task.model, w, s) - empirical_loss(task.model, w + xi, s).mean()
                 for w, s in ((traj.final, st.S), (traj.final, st.S_prime), (twin.final, st.S), (twin.final, st.S_prime))]
            sym.append(0.5 * ((a[1] - a[0]) + (a[2] - a[3])))
        out["sym_dd"] = np.array(sym)
        out["gap"] = _gap_of(task, traj.final, st)[2]
        return out

    stats = _pmap(trial, range(cfg.trials), ctx.threads)
    diffs = np.stack([s["diff"] for s in stats])
    sym = np.stack([s["sym_dd"] for s in stats])
    grid = [Isotropic(float(s) ** 2, d) for s in sigmas]
    rep = generic_output_bound(diffs, grid, [Estimate.from_samples(sym[:, g]) for g in range(sigmas.size)], task.R, n)
    t1 = _theorem1_over_grid(stats, sigmas, etas, task.R, n)
    gsq = np.stack([s["grad_sqdiff"] for s in stats]).mean(axis=0)
    sqdist = float(np.mean(np.sum(diffs**2, axis=1)))
    curve = Table(["sigma", "first_term", "first_se", "delta_term", "delta_se", "total", "total_se", "mean_sqdist",
                   "theorem1_total", "marginal_diag", "pathwise_diag", "output_diag", "valid"])
    gap = Estimate.from_samples([s["gap"] for s in stats])
    marg, path, violations = [], [], 0
    for g, (sigma, c) in enumerate(zip(sigmas, rep.extras["curve"])):
        ok, _ = _validity(gap, c["total"], c["total_se"])
        violations += not ok
        norm = 2 * float(sigma) ** 2 * T
        marg.append(float(np.sum(etas**2 * gsq)) / norm)
        path.append(sum(e * e * (r.gamma_hat + r.v_hat) for e, r in zip(etas, t1[g].per_step)) / norm)
        curve.add(sigma=float(sigma), theorem1_total=t1[g].total, marginal_diag=marg[-1], pathwise_diag=path[-1],
                  output_diag=sqdist / norm, valid=bool(ok), **{k: c[k] for k in ("first_term", "first_se", "delta_term", "delta_se",
                                                                 "total", "total_se", "mean_sqdist")})
    first = np.array([c["first_term"] for c in rep.extras["curve"]])
    scaled = first * sigmas
    ref = scaled[0]
    law = float(np.max(np.abs(scaled - ref)) / abs(ref)) if ref != 0 else float(np.max(np.abs(scaled)))
    b1 = min(range(len(t1)), key=lambda i: (t1[i].total, sigmas[i], i))
    s2 = float(sigmas[b1]) ** 2
    summary = {
        "n": n, "T": int(T), "gap": gap.value, "gap_se": gap.std_error,
        "generic_min": rep.total, "generic_min_se": rep.total_se, "generic_min_sigma": float(sigmas[rep.extras["best_index"]]),
        "theorem1_min": t1[b1].total, "theorem1_min_sigma": float(sigmas[b1]),
        "inverse_sigma_law_max_rel_dev": law, "violations": violations, "all_valid": violations == 0,
        "diagnostic_sigma": float(sigmas[b1]),
        "marginal_variance_diagnostic": marg[b1],
        "marginal_variance_sum": marg[b1] * T,
        "output_distance_diagnostic": sqdist / (2 * s2 * T),
        "pathwise_gamma_v_analog": path[b1],
        "marginal_ge_pathwise": bool(marg[b1] >= path[b1]),
        "marginal_ge_pathwise_fraction": float(np.mean(np.array(marg) >= np.array(path))),
    }
    per_step = Table(list(STEP_TABLE_COLUMNS))
    _add_steps(per_step, n, t1[b1], "theorem1")
    rep_d = _report_dict(rep)
    art = RunArtifact("generic-bound", cfg.to_dict(), clean(summary), [rep_d, _report_dict(t1[b1])],
                      {"generic_curve": curve, "per_step": per_step})
    art.exit_code = 0 if violations == 0 else 4
    return art


COMMANDS = {
    "bound-vs-gap": cmd_bound_vs_gap,
    "rate-scan": cmd_rate_scan,
    "sgd-vs-sgld": cmd_sgd_vs_sgld,
    "aniso-compare": cmd_aniso_compare,
    "kl-verify": cmd_kl_verify,
    "generic-bound": cmd_generic_bound,
}


def estimate_seconds(cfg: ExperimentConfig) -> float:
    """Rough runtime forecast from the config (desk-scale constants, single thread)."""
    if cfg.kind in ("rate-scan",):
        return 0.01
    if cfg.kind == "kl-verify":
        return 0.02 * int(cfg.params.get("trials") or cfg.trials)
    G = cfg.sigma_grid.values_array().size
    total = 0.0
    for n in cfg.n_values:
        T = cfg.optimizer.steps_for(n)
        per_trial = 2.5e-5 * T + 1e-6 * G * T * cfg.mc.m_gamma + 1e-8 * G * cfg.mc.m_delta * n * 4
        if cfg.kind == "sgd-vs-sgld":
            per_trial += 2.5e-5 * T * G
        if cfg.kind == "aniso-compare":
            per_trial *= 1 + G ** (cfg.problem.build_spec().dim - 1) * max(1, int(cfg.params.get("refine", 0))) ** 2
        total += per_trial * cfg.trials
    return total
