"""Monte Carlo estimators for value sensitivity, gradient sensitivity, gradient
variance and the generalization gap, plus per-trajectory statistics feeding the
bound assemblers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .bounds import SigmaSchedule
from .numerics import CovSpec, RandomSource, RngLike, as_generator
from .optimizer import DivergenceError, Trajectory
from .problems import Dataset, DistributionSpec, LossModel, PopulationGradient, empirical_loss, generate_dataset

__all__ = [
    "MCConfig",
    "Estimate",
    "TrialDivergence",
    "estimate_delta",
    "estimate_delta_difference",
    "estimate_gamma",
    "estimate_variance",
    "estimate_gap",
    "GapResult",
    "IsoPathStats",
    "CovPathStats",
    "iso_path_statistics",
    "cov_path_statistics",
    "DiagPathStats",
    "diag_path_statistics",
    "trial_mean",
]


@dataclass(frozen=True)
class MCConfig:
    m: int = 1000
    stream: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need m >= 2 samples for a standard error")


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    samples: int

    @classmethod
    def from_samples(cls, x) -> "Estimate":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size < 2:
            return cls(float(x.mean()) if x.size else math.nan, math.nan, int(x.size))
        return cls(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), int(x.size))


class TrialDivergence(ArithmeticError):
    def __init__(self, trial: int, step: int):
        super().__init__(f"divergence at step {step} in trial {trial}")
        self.trial = trial
        self.step = step


def _gen(rng: RngLike, mc: MCConfig) -> np.random.Generator:
    if isinstance(rng, RandomSource):
        return rng.child("mc", mc.stream).generator()
    return as_generator(rng)


def _loss_drops(model, w, datasets, xi, antithetic):
    """Per-draw L(w, s) - L(w + xi, s) for every dataset (CRN across datasets)."""
    out = []
    for s in datasets:
        base = empirical_loss(model, w, s)
        plus = empirical_loss(model, w + xi, s)
        if antithetic:
            minus = empirical_loss(model, w - xi, s)
            out.append(base - 0.5 * (plus + minus))
        else:
            out.append(base - plus)
    return out


def estimate_delta(model: LossModel, w, s: Dataset, cov: CovSpec, mc: MCConfig, rng: RngLike) -> Estimate:
    """MC estimate of E[L(w, s) - L(w + xi, s)], xi ~ N(0, cov).

    ``mc.m`` counts perturbation draws; antithetic mode evaluates both +xi and -xi.
    """
    if s.n == 0:
        raise ValueError("value sensitivity on an empty dataset")
    if cov.is_zero:
        return Estimate(0.0, 0.0, mc.m)
    w = np.asarray(w, dtype=float)
    xi = cov.apply_factor(_gen(rng, mc).standard_normal((mc.m, cov.dim)))
    (drops,) = _loss_drops(model, w, [s], xi, mc.antithetic)
    return Estimate.from_samples(drops)


def estimate_delta_difference(model, w, s: Dataset, s_prime: Dataset, cov: CovSpec, mc: MCConfig, rng):
    """Delta(w, s') - Delta(w, s) with the same perturbation draws on both datasets.

    Returns ``(difference, delta_s, delta_s_prime)``.
    """
    if s.n == 0 or s_prime.n == 0:
        raise ValueError("value sensitivity on an empty dataset")
    if cov.is_zero:
        zero = Estimate(0.0, 0.0, mc.m)
        return zero, zero, zero
    w = np.asarray(w, dtype=float)
    xi = cov.apply_factor(_gen(rng, mc).standard_normal((mc.m, cov.dim)))
    d_s, d_sp = _loss_drops(model, w, [s, s_prime], xi, mc.antithetic)
    return Estimate.from_samples(d_sp - d_s), Estimate.from_samples(d_s), Estimate.from_samples(d_sp)


def _sqnorm(x, weight_cov: Optional[CovSpec]):
    if weight_cov is None:
        return np.sum(x * x, axis=-1)
    return weight_cov.weighted_sqnorm(x)


def estimate_gamma(
    popgrad: PopulationGradient, w, perturb_cov: CovSpec, weight_cov: Optional[CovSpec],
    mc: MCConfig, rng: RngLike,
) -> Estimate:
    """MC estimate of E||gbar(w) - gbar(w + xi)||^2_{weight^-1}, xi ~ N(0, perturb_cov).

    ``weight_cov=None`` is the plain Euclidean norm.
    """
    if perturb_cov.is_zero:
        return Estimate(0.0, 0.0, mc.m)
    w = np.asarray(w, dtype=float)
    xi = perturb_cov.apply_factor(_gen(rng, mc).standard_normal((mc.m, perturb_cov.dim)))
    diff = popgrad(w)[None, :] - popgrad(w + xi)
    return Estimate.from_samples(_sqnorm(diff, weight_cov))


def estimate_variance(
    model: LossModel,
    popgrad: PopulationGradient,
    w,
    b: int,
    weight_cov: Optional[CovSpec] = None,
    mode: str = "fresh-resample",
    *,
    spec: Optional[DistributionSpec] = None,
    k: int = 1000,
    rng: Optional[RngLike] = None,
    batch=None,
    dataset: Optional[Dataset] = None,
) -> Estimate:
    """Gradient variance around the population gradient, ||g(w, B) - gbar(w)||^2.

    ``realized`` uses the recorded minibatch ``batch`` of ``dataset`` and
    returns a single sample (std error NaN). ``fresh-resample`` averages over
    ``k`` fresh size-b batches drawn from ``spec``.
    """
    if b <= 0:
        raise ValueError("batch size must be positive")
    w = np.asarray(w, dtype=float)
    center = popgrad(w)
    if mode == "realized":
        if batch is None or dataset is None:
            raise ValueError("realized mode needs the recorded minibatch and dataset")
        J = np.asarray(batch, dtype=int)
        g = model.train_grads(w, dataset.X[J], dataset.y[J]).mean(axis=0)
        return Estimate(float(_sqnorm(g - center, weight_cov)), math.nan, 1)
    if mode != "fresh-resample":
        raise ValueError(f"unknown variance mode {mode!r}")
    if spec is None or rng is None:
        raise ValueError("fresh-resample mode needs the distribution spec and an rng")
    X, y = spec.sample(k * b, as_generator(rng))
    g = model.train_grads(w, X, y).reshape(k, b, model.dim).mean(axis=1)
    return Estimate.from_samples(_sqnorm(g - center, weight_cov))


@dataclass(frozen=True)
class GapResult:
    estimate: Estimate
    per_trial: np.ndarray
    train_loss: np.ndarray
    test_loss: np.ndarray


def estimate_gap(
    run_algorithm: Callable[[Dataset, RandomSource], np.ndarray],
    model: LossModel,
    spec: DistributionSpec,
    n: int,
    trials: int,
    rng: RandomSource,
    test_mode: str = "fresh-S-prime",
    n_test: Optional[int] = None,
) -> GapResult:
    """Mean over ``trials`` of L(W, S') - L(W, S) with fresh S, S' per trial.

    ``run_algorithm(S, source)`` returns the output parameters; ``source`` is a
    per-trial stream independent of the data streams.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    if test_mode not in ("fresh-S-prime", "large-test"):
        raise ValueError(f"unknown test mode {test_mode!r}")
    m_test = n if test_mode == "fresh-S-prime" else int(n_test or 100 * n)
    gaps, train, test = np.empty(trials), np.empty(trials), np.empty(trials)
    for k in range(trials):
        trial = rng.child("trial", k)
        S = generate_dataset(spec, n, trial.child("train-data"))
        S_prime = generate_dataset(spec, m_test, trial.child("test-data"))
        try:
            W = run_algorithm(S, trial.child("algorithm"))
        except DivergenceError as err:
            raise TrialDivergence(k, err.step) from err
        train[k] = empirical_loss(model, W, S)
        test[k] = empirical_loss(model, W, S_prime)
        gaps[k] = test[k] - train[k]
    return GapResult(Estimate.from_samples(gaps), gaps, train, test)


# ---------------------------------------------------------------- path statistics


@dataclass
class IsoPathStats:
    """Per-trajectory statistics for a family of isotropic sigma schedules.

    ``gamma[g, t]`` is the Euclidean gradient sensitivity at cumulative variance
    ``cum_s2[g, t]``, ``v[t]`` the realized squared deviation
    ||G_t - gbar(W_t)||^2, and ``delta_diff[g]`` the perturbation-draw average
    of Delta(W, S') - Delta(W, S) at the final cumulative variance.
    """

    gamma: np.ndarray
    v: np.ndarray
    delta_diff: np.ndarray
    delta_diff_alt: np.ndarray
    delta_s: np.ndarray
    delta_sp: np.ndarray


def _cum_variances(step_s2: np.ndarray):
    cum = np.concatenate([np.zeros((step_s2.shape[0], 1)), np.cumsum(step_s2, axis=1)], axis=1)
    return cum[:, :-1], cum[:, -1], cum[:, -2]


def iso_path_statistics(
    traj: Trajectory,
    popgrad: PopulationGradient,
    step_s2: np.ndarray,
    model: LossModel,
    S: Dataset,
    S_prime: Dataset,
    m_gamma: int,
    m_delta: int,
    rng: RngLike,
) -> IsoPathStats:
    """Statistics for G schedules given as per-step variances ``step_s2`` (G, T).

    The same standard-normal draws are reused across schedules (common random
    numbers), so grid comparisons see identical noise.
    """
    gen = as_generator(rng)
    step_s2 = np.atleast_2d(np.asarray(step_s2, dtype=float))
    T, d = traj.T, traj.iterates.shape[1]
    z = gen.standard_normal((T, m_gamma, d))
    z_delta = gen.standard_normal((m_delta, d))
    W = traj.iterates[:T]
    g_at = popgrad(W)
    v = np.sum((traj.grads - g_at) ** 2, axis=1)
    cum, final, alt = _cum_variances(step_s2)
    scale = np.sqrt(cum)[:, :, None, None]  # (G, T, 1, 1)
    moved = popgrad(W[None, :, None, :] + scale * z[None])
    gamma = np.mean(np.sum((g_at[None, :, None, :] - moved) ** 2, axis=-1), axis=-1)
    w_out = traj.final
    dd, da, ds, dsp = [], [], [], []
    for f, a in zip(final, alt):
        d_s, d_sp = _loss_drops(model, w_out, [S, S_prime], math.sqrt(f) * z_delta, False)
        a_s, a_sp = _loss_drops(model, w_out, [S, S_prime], math.sqrt(a) * z_delta, False)
        dd.append(np.mean(d_sp - d_s))
        da.append(np.mean(a_sp - a_s))
        ds.append(np.mean(d_s))
        dsp.append(np.mean(d_sp))
    return IsoPathStats(gamma, v, np.array(dd), np.array(da), np.array(ds), np.array(dsp))


@dataclass
class CovPathStats:
    """Per-trajectory covariance-weighted statistics for one schedule."""

    gamma: np.ndarray  # (T,)
    v: np.ndarray  # (T,)
    delta_diff: float


def cov_path_statistics(
    traj: Trajectory,
    popgrad: PopulationGradient,
    schedules: Sequence[SigmaSchedule],
    model: LossModel,
    S: Dataset,
    S_prime: Dataset,
    m_gamma: int,
    m_delta: int,
    rng: RngLike,
) -> list:
    """Weighted Gamma_{Sigma_t, Sigma_{1:t}}, V_{t, Sigma_t} and Delta_{Sigma_{1:T+1}} per schedule.

    Draws the same standard normals as :func:`iso_path_statistics` for the same
    ``rng`` so the two paths can be compared on identical streams.
    """
    gen = as_generator(rng)
    T, d = traj.T, traj.iterates.shape[1]
    z = gen.standard_normal((T, m_gamma, d))
    z_delta = gen.standard_normal((m_delta, d))
    W = traj.iterates[:T]
    g_at = popgrad(W)
    resid = traj.grads - g_at
    w_out = traj.final
    out = []
    for sched in schedules:
        if sched.T != T or sched.dim != d:
            raise ValueError("schedule does not match the trajectory")
        F_cum = sched.cumulative_factors()
        F_step = sched.step_factors()
        xi = np.einsum("tab,tjb->tja", F_cum, z)
        diff = g_at[:, None, :] - popgrad(W[:, None, :] + xi)
        sol = np.linalg.solve(F_step[:, None], diff[..., None])[..., 0]
        gamma = np.mean(np.sum(sol * sol, axis=-1), axis=-1)
        sv = np.linalg.solve(F_step, resid[..., None])[..., 0]
        v = np.sum(sv * sv, axis=-1)
        xi_out = sched.final_cumulative.apply_factor(z_delta)
        d_s, d_sp = _loss_drops(model, w_out, [S, S_prime], xi_out, False)
        out.append(CovPathStats(gamma, v, float(np.mean(d_sp - d_s))))
    return out


@dataclass
class DiagPathStats:
    """Weighted statistics for G constant diagonal schedules; arrays lead with G."""

    gamma: np.ndarray  # (G, T)
    v: np.ndarray  # (G, T)
    delta_diff: np.ndarray  # (G,)


def diag_path_statistics(
    traj: Trajectory,
    popgrad: PopulationGradient,
    diag_s2: np.ndarray,
    model: LossModel,
    S: Dataset,
    S_prime: Dataset,
    m_gamma: int,
    m_delta: int,
    rng: RngLike,
    chunk: int = 64,
) -> DiagPathStats:
    """Vectorised :func:`cov_path_statistics` for schedules Sigma_t = diag(diag_s2[g]) at every step.

    Consumes the same draws as the general routine, so results agree with it
    up to rounding.
    """
    gen = as_generator(rng)
    diag_s2 = np.atleast_2d(np.asarray(diag_s2, dtype=float))
    if np.any(diag_s2 <= 0):
        raise ValueError("diagonal schedules must be positive definite")
    T, d = traj.T, traj.iterates.shape[1]
    z = gen.standard_normal((T, m_gamma, d))
    z_delta = gen.standard_normal((m_delta, d))
    W = traj.iterates[:T]
    g_at = popgrad(W)
    resid = traj.grads - g_at
    w_out = traj.final
    steps = np.arange(T, dtype=float)  # t - 1 accumulated steps before step t
    G = diag_s2.shape[0]
    gamma, v, dd = np.empty((G, T)), np.empty((G, T)), np.empty(G)
    for lo in range(0, G, chunk):
        D = diag_s2[lo:lo + chunk]  # (c, d)
        sd_cum = np.sqrt(steps[None, :, None] * D[:, None, :])  # (c, T, d)
        moved = popgrad(W[None, :, None, :] + sd_cum[:, :, None, :] * z[None])
        diff = g_at[None, :, None, :] - moved
        gamma[lo:lo + chunk] = np.mean(np.sum(diff * diff / D[:, None, None, :], axis=-1), axis=-1)
        v[lo:lo + chunk] = np.sum(resid[None] ** 2 / D[:, None, :], axis=-1)
        xi = np.sqrt(T * D)[:, None, :] * z_delta[None]  # (c, m_delta, d)
        pts = (w_out + xi).reshape(-1, d)
        drops = []
        for s in (S, S_prime):
            base = empirical_loss(model, w_out, s)
            drops.append(base - empirical_loss(model, pts, s).reshape(D.shape[0], m_delta))
        dd[lo:lo + chunk] = np.mean(drops[1] - drops[0], axis=1)
    return DiagPathStats(gamma, v, dd)


def trial_mean(values: np.ndarray):
    """Mean and standard error along the leading (trial) axis."""
    values = np.asarray(values, dtype=float)
    K = values.shape[0]
    se = values.std(axis=0, ddof=1) / math.sqrt(K) if K > 1 else np.full(values.shape[1:], math.nan)
    return values.mean(axis=0), se
