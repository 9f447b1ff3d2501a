"""SGD, SGLD, the noise-only perturbed replay of an SGD path, and iterate averaging.

A run of T update steps maps W_1 to W_{T+1}; ``Trajectory.iterates`` therefore
has T + 1 rows and ``grads`` has T rows. All schedules are built before the
first gradient evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import CovSpec, RandomSource, RngLike, as_generator
from .problems import Dataset, LossModel, minibatch_grad

__all__ = [
    "StepSchedule",
    "BatchSchedule",
    "Trajectory",
    "DivergenceError",
    "make_batch_schedule",
    "init_params",
    "run_sgd",
    "run_sgld",
    "run_perturbed_path",
    "run_sgd_averaged",
    "averaging_closed_form",
]

BATCH_KINDS = ("single-pass-partition", "with-replacement", "shuffled-multipass", "cyclic")


class DivergenceError(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"divergence at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class StepSchedule:
    etas: np.ndarray
    rule: str = "list"

    def __post_init__(self):
        etas = np.array(self.etas, dtype=float).reshape(-1)
        if np.any(etas < 0) or not np.all(np.isfinite(etas)):
            raise ValueError("learning rates must be finite and nonnegative")
        etas.setflags(write=False)
        object.__setattr__(self, "etas", etas)

    @classmethod
    def constant(cls, eta: float, T: int) -> "StepSchedule":
        return cls(np.full(T, float(eta)), "constant")

    @classmethod
    def one_over_n(cls, c: float, n: int, T: int) -> "StepSchedule":
        return cls(np.full(T, c / n), "one-over-n")

    @property
    def T(self) -> int:
        return self.etas.size

    def to_dict(self):
        return {"rule": self.rule, "etas": [float(e) for e in self.etas]}


@dataclass(frozen=True, eq=False)
class BatchSchedule:
    kind: str
    batches: tuple
    n: int

    @property
    def T(self) -> int:
        return len(self.batches)

    @property
    def batch_sizes(self) -> np.ndarray:
        return np.array([len(J) for J in self.batches])

    @property
    def pass_count(self) -> float:
        return float(self.batch_sizes.sum()) / self.n

    @property
    def is_single_pass(self) -> bool:
        return self.kind == "single-pass-partition"

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "batches": [[int(i) for i in J] for J in self.batches]}


def make_batch_schedule(kind: str, n: int, b, T: int, rng: Optional[RngLike] = None) -> BatchSchedule:
    """Index sets J_1..J_T fixed up front; ``b`` is a constant or a per-step list."""
    if kind not in BATCH_KINDS:
        raise ValueError(f"unknown batch schedule kind {kind!r}")
    sizes = np.full(T, int(b)) if np.isscalar(b) else np.asarray(b, dtype=int)
    if sizes.size != T:
        raise ValueError("batch-size list length must equal T")
    if T == 0:
        return BatchSchedule(kind, (), n)
    if np.any(sizes <= 0) or np.any(sizes > n):
        raise ValueError(f"batch sizes must lie in [1, n={n}]")
    cuts = np.cumsum(sizes)[:-1]
    if kind == "cyclic":
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        batches = tuple((s + np.arange(k)) % n for s, k in zip(starts, sizes))
        return BatchSchedule(kind, batches, n)
    gen = as_generator(rng if rng is not None else 0)
    if kind == "single-pass-partition":
        if sizes.sum() != n:
            raise ValueError(f"single-pass schedule needs sum of batch sizes == n ({sizes.sum()} != {n})")
        return BatchSchedule(kind, tuple(np.split(gen.permutation(n), cuts)), n)
    if kind == "with-replacement":
        return BatchSchedule(kind, tuple(gen.choice(n, size=k, replace=False) for k in sizes), n)
    # shuffled-multipass: consecutive epochs of fresh permutations
    total = int(sizes.sum())
    epochs = -(-total // n)
    order = np.concatenate([gen.permutation(n) for _ in range(epochs)])[:total]
    return BatchSchedule(kind, tuple(np.split(order, cuts)), n)


def init_params(dim: int, kind: str = "zero", sd: float = 1.0, rng: Optional[RngLike] = None) -> np.ndarray:
    if kind == "zero":
        return np.zeros(dim)
    if kind == "gaussian":
        return sd * as_generator(rng if rng is not None else 0).standard_normal(dim)
    raise ValueError(f"unknown initializer {kind!r}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    iterates: np.ndarray  # (T+1, d): W_1 .. W_{T+1}
    grads: np.ndarray  # (T, d): G_1 .. G_T
    batches: tuple
    etas: np.ndarray
    kind: str = "sgd"
    noise: Optional[np.ndarray] = None  # (T, d) added per step, if any
    averages: Optional[np.ndarray] = None  # (T+1, d): U_1 .. U_{T+1}
    gammas: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.grads.shape[0]
        if self.iterates.shape[0] != T + 1 or self.etas.size != T or len(self.batches) != T:
            raise ValueError("inconsistent trajectory lengths")

    @property
    def T(self) -> int:
        return self.grads.shape[0]

    @property
    def final(self) -> np.ndarray:
        if self.averages is not None:
            return self.averages[-1]
        return self.iterates[-1]

    def replay_error(self) -> float:
        """Max deviation of stored iterates from re-applying the update rule."""
        step = self.iterates[:-1] - self.etas[:, None] * self.grads
        if self.noise is not None:
            step = step + self.noise
        return float(np.max(np.abs(step - self.iterates[1:]), initial=0.0))

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "T": self.T,
            "iterates": self.iterates.tolist(),
            "grads": self.grads.tolist(),
            "batches": [[int(i) for i in J] for J in self.batches],
            "etas": self.etas.tolist(),
            "provenance": self.provenance,
        }
        if self.noise is not None:
            out["noise"] = self.noise.tolist()
        if self.averages is not None:
            out["averages"] = self.averages.tolist()
            out["gammas"] = self.gammas.tolist()
        return out


def _check_lengths(steps: StepSchedule, batches: BatchSchedule, dataset: Dataset):
    if steps.T != batches.T:
        raise ValueError(f"step schedule has T={steps.T}, batch schedule has T={batches.T}")
    if batches.n != dataset.n:
        raise ValueError("batch schedule was built for a different dataset size")


def _descend(model, dataset, steps, batches, w1, noise=None, clipped=None):
    T = steps.T
    W = np.empty((T + 1, model.dim))
    G = np.empty((T, model.dim))
    W[0] = w1
    # overflow is reported as DivergenceError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            G[t] = minibatch_grad(model, W[t], dataset, batches.batches[t], clipped)
            W[t + 1] = W[t] - steps.etas[t] * G[t]
            if noise is not None:
                W[t + 1] = W[t + 1] + noise[t]
            if not np.all(np.isfinite(W[t + 1])):
                raise DivergenceError(t + 1)
    return W, G


def _provenance(rng) -> dict:
    if isinstance(rng, RandomSource):
        return {"seed": rng.seed, "stream": rng.stream}
    return {}


def run_sgd(
    model: LossModel,
    dataset: Dataset,
    steps: StepSchedule,
    batches: BatchSchedule,
    w1,
    rng: Optional[RngLike] = None,
    clipped: Optional[bool] = None,
) -> Trajectory:
    """W_{t+1} = W_t - eta_t g(W_t, Z_{J_t}) for t = 1..T."""
    _check_lengths(steps, batches, dataset)
    W, G = _descend(model, dataset, steps, batches, np.asarray(w1, dtype=float), clipped=clipped)
    return Trajectory(W, G, batches.batches, steps.etas, "sgd", provenance=_provenance(rng))


def _draw_noise(sigma: Sequence[CovSpec], dim: int, rng: RngLike) -> np.ndarray:
    gen = as_generator(rng)
    z = gen.standard_normal((len(sigma), dim))
    return np.stack([cov.apply_factor(z[t]) for t, cov in enumerate(sigma)]) if len(sigma) else z


def run_sgld(
    model: LossModel,
    dataset: Dataset,
    steps: StepSchedule,
    batches: BatchSchedule,
    sigma: Sequence[CovSpec],
    w1,
    rng: RngLike,
    clipped: Optional[bool] = None,
) -> Trajectory:
    """SGD plus eps_t ~ N(0, Sigma_t) after every step; ``rng`` drives only the noise."""
    _check_lengths(steps, batches, dataset)
    if len(sigma) != steps.T:
        raise ValueError("need one noise covariance per step")
    noise = _draw_noise(sigma, model.dim, rng)
    W, G = _descend(model, dataset, steps, batches, np.asarray(w1, dtype=float), noise, clipped)
    return Trajectory(W, G, batches.batches, steps.etas, "sgld", noise=noise, provenance=_provenance(rng))


def run_perturbed_path(traj: Trajectory, sigma: Sequence[CovSpec], rng: RngLike) -> Trajectory:
    """Replay recorded SGD gradients with added noise: W~_{t+1} = W~_t - eta_t G_t + eps_t.

    Only the stored gradients are used, so W~_t - W_t is exactly the noise sum.
    """
    if len(sigma) != traj.T:
        raise ValueError("need one noise covariance per recorded step")
    noise = _draw_noise(sigma, traj.iterates.shape[1], rng)
    W = np.empty_like(traj.iterates)
    W[0] = traj.iterates[0]
    for t in range(traj.T):
        W[t + 1] = W[t] - traj.etas[t] * traj.grads[t] + noise[t]
    return Trajectory(W, traj.grads, traj.batches, traj.etas, "perturbed", noise=noise, provenance=_provenance(rng))


def run_sgd_averaged(
    model: LossModel,
    dataset: Dataset,
    steps: StepSchedule,
    batches: BatchSchedule,
    gammas,
    w1,
    rng: Optional[RngLike] = None,
) -> Trajectory:
    """SGD with averaged output U_{t+1} = gamma_t U_t + (1 - gamma_t) W_t, U_1 = W_1."""
    gammas = np.asarray(gammas, dtype=float).reshape(-1)
    if gammas.size != steps.T:
        raise ValueError("need one averaging weight per step")
    if np.any(gammas < 0) or np.any(gammas > 1):
        raise ValueError("averaging weights must lie in [0, 1]")
    traj = run_sgd(model, dataset, steps, batches, w1, rng)
    U = np.empty_like(traj.iterates)
    U[0] = traj.iterates[0]
    for t in range(steps.T):
        U[t + 1] = gammas[t] * U[t] + (1.0 - gammas[t]) * traj.iterates[t]
    return Trajectory(
        traj.iterates, traj.grads, traj.batches, traj.etas, "sgd-averaged",
        averages=U, gammas=gammas, provenance=traj.provenance,
    )


def averaging_closed_form(iterates: np.ndarray, gammas) -> np.ndarray:
    """Unrolled U_{T+1} = prod_k gamma_k U_1 + sum_t (1 - gamma_t) prod_{k>t} gamma_k W_t."""
    gammas = np.asarray(gammas, dtype=float)
    T = gammas.size
    tail = np.append(np.cumprod(gammas[::-1])[::-1], 1.0)  # tail[t] = prod_{k>=t} gamma_k
    weights = (1.0 - gammas) * tail[1:]
    return tail[0] * iterates[0] + weights @ iterates[:T]
