"""Synthetic data laws, datasets and differentiable per-example losses.

Every loss model works on flat parameter vectors of length ``dim`` and exposes
vectorised losses (over a batch of parameter vectors) and per-example
gradients. Clipping applies to loss *values*; training gradients stay unclipped
unless ``train_on_clipped`` is set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np
from scipy.special import expit, log_expit

from .numerics import RandomSource, RngLike, as_generator

__all__ = [
    "DataPoint",
    "Dataset",
    "LinearRegressionGaussian",
    "LogisticTwoGaussians",
    "MeanEstimation",
    "DistributionSpec",
    "LossModel",
    "QuadraticLoss",
    "MeanLoss",
    "LogisticLoss",
    "LinearLoss",
    "SmallMLP",
    "PopulationGradient",
    "SmoothnessReport",
    "NoAnalyticGradient",
    "generate_dataset",
    "empirical_loss",
    "minibatch_grad",
    "population_grad",
    "population_gradient",
    "verify_smoothness",
    "subgaussian_constant",
    "dataset_to_jsonl",
    "dataset_from_jsonl",
]


class NoAnalyticGradient(ValueError):
    pass


# --------------------------------------------------------------------------- data


class DataPoint(NamedTuple):
    features: np.ndarray
    label: float


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    spec_id: str = "custom"
    source: Optional[RandomSource] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {X.shape} and {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def __len__(self):
        return self.n

    def __iter__(self) -> Iterator[DataPoint]:
        for i in range(self.n):
            yield DataPoint(self.X[i], float(self.y[i]))

    def point(self, i: int) -> DataPoint:
        return DataPoint(self.X[i], float(self.y[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.spec_id)

    def tobytes(self) -> bytes:
        return self.X.tobytes() + self.y.tobytes()


@dataclass(frozen=True, eq=False)
class LinearRegressionGaussian:
    """x ~ N(0, feature_cov), y = <true_w, x> + noise_sd * N(0, 1)."""

    feature_cov: np.ndarray
    true_w: np.ndarray
    noise_sd: float = 0.0
    spec_id: str = "linreg-gaussian"
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.array(self.feature_cov, dtype=float))
        w = np.array(self.true_w, dtype=float).reshape(-1)
        if cov.shape != (w.size, w.size):
            raise ValueError("feature_cov and true_w dimensions disagree")
        if self.noise_sd < 0 or not np.isfinite(self.noise_sd):
            raise ValueError("noise_sd must be finite and >= 0")
        object.__setattr__(self, "feature_cov", cov)
        object.__setattr__(self, "true_w", w)
        object.__setattr__(self, "_factor", np.linalg.cholesky(cov))

    @property
    def dim(self) -> int:
        return self.true_w.size

    def second_moment(self) -> np.ndarray:
        return self.feature_cov

    def sample(self, n: int, gen: np.random.Generator):
        X = gen.standard_normal((n, self.dim)) @ self._factor.T
        y = X @ self.true_w + self.noise_sd * gen.standard_normal(n)
        return X, y


@dataclass(frozen=True)
class LogisticTwoGaussians:
    """y = +-1 equiprobable, x | y ~ N(y * (mean_separation / 2) e_1, feature_sd^2 I)."""

    mean_separation: float
    feature_sd: float
    dim: int = 2
    spec_id: str = "logistic-two-gaussians"

    def __post_init__(self):
        if not (np.isfinite(self.mean_separation) and self.feature_sd > 0):
            raise ValueError("need finite separation and positive feature_sd")

    @property
    def class_mean(self) -> np.ndarray:
        m = np.zeros(self.dim)
        m[0] = self.mean_separation / 2
        return m

    def sample(self, n: int, gen: np.random.Generator):
        y = np.where(gen.random(n) < 0.5, -1.0, 1.0)
        X = y[:, None] * self.class_mean + self.feature_sd * gen.standard_normal((n, self.dim))
        return X, y


@dataclass(frozen=True, eq=False)
class MeanEstimation:
    """z ~ N(mean, sd^2 I) stored as features; labels are zero."""

    mean: np.ndarray
    sd: float
    spec_id: str = "mean-estimation"

    def __post_init__(self):
        object.__setattr__(self, "mean", np.array(self.mean, dtype=float).reshape(-1))
        if self.sd < 0 or not np.isfinite(self.sd):
            raise ValueError("sd must be finite and >= 0")

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, gen: np.random.Generator):
        X = self.mean + self.sd * gen.standard_normal((n, self.dim))
        return X, np.zeros(n)


DistributionSpec = LinearRegressionGaussian | LogisticTwoGaussians | MeanEstimation


def generate_dataset(spec: DistributionSpec, n: int, rng: RngLike) -> Dataset:
    """n i.i.d. draws; a ``RandomSource`` makes the dataset regenerable bit-exactly."""
    if n < 0:
        raise ValueError("n must be >= 0")
    X, y = spec.sample(n, as_generator(rng))
    return Dataset(X, y, spec.spec_id, rng if isinstance(rng, RandomSource) else None)


def dataset_to_jsonl(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for x, label in ds:
            fh.write(json.dumps({"features": [float(v) for v in x], "label": label}) + "\n")


def dataset_from_jsonl(path, spec_id: str = "imported") -> Dataset:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        return Dataset(np.zeros((0, 0)), np.zeros(0), spec_id)
    return Dataset([r["features"] for r in rows], [r["label"] for r in rows], spec_id)


# ------------------------------------------------------------------------ losses


@dataclass(frozen=True)
class LossModel:
    """Per-example loss l(w, z) with gradient g(w, z).

    Subclasses implement ``raw_losses`` (batched over parameter vectors) and
    ``point_grads`` (per example, single parameter vector).
    """

    dim: int
    clip: Optional[float] = None
    train_on_clipped: bool = False
    smoothness_mu: Optional[float] = None
    subgaussian_R: Optional[float] = None
    variance_cap: Optional[float] = None

    kind = "abstract"

    def __post_init__(self):
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip bound B must be positive")

    def raw_losses(self, W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unclipped losses, shape (k, n) for W of shape (k, d)."""
        raise NotImplementedError

    def point_grads(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unclipped per-example gradients, shape (n, d)."""
        raise NotImplementedError

    def batch_mean_grads(self, W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unclipped mean gradient over examples for every row of W, shape (k, d)."""
        return np.stack([self.point_grads(w, X, y).mean(axis=0) for w in W])

    def eval_losses(self, W, X, y):
        loss = self.raw_losses(np.atleast_2d(W), X, y)
        if self.clip is not None:
            loss = np.clip(loss, 0.0, self.clip)
        return loss

    def train_grads(self, w, X, y, clipped: Optional[bool] = None):
        grads = self.point_grads(w, X, y)
        if clipped is None:
            clipped = self.train_on_clipped
        if clipped and self.clip is not None:
            loss = self.raw_losses(np.atleast_2d(w), X, y)[0]
            inside = (loss > 0.0) & (loss < self.clip)
            grads = grads * inside[:, None]
        return grads

    def train_mean_grads(self, W, X, y):
        if self.train_on_clipped and self.clip is not None:
            return np.stack([self.train_grads(w, X, y).mean(axis=0) for w in W])
        return self.batch_mean_grads(W, X, y)

    @property
    def R(self) -> Optional[float]:
        if self.clip is not None:
            return self.clip / 2
        return self.subgaussian_R


@dataclass(frozen=True)
class QuadraticLoss(LossModel):
    """l(w, (x, y)) = (<w, x> - y)^2 / 2."""

    kind = "quadratic"

    def raw_losses(self, W, X, y):
        r = np.atleast_2d(W) @ X.T - y
        return 0.5 * r * r

    def point_grads(self, w, X, y):
        return (X @ w - y)[:, None] * X

    def batch_mean_grads(self, W, X, y):
        r = np.atleast_2d(W) @ X.T - y
        return r @ X / X.shape[0]


@dataclass(frozen=True)
class MeanLoss(LossModel):
    """l(w, z) = ||w - z||^2 / 2 with z stored as the features."""

    kind = "mean"

    def raw_losses(self, W, X, y):
        W = np.atleast_2d(W)
        sq = np.sum(W * W, axis=1)[:, None] - 2 * W @ X.T + np.sum(X * X, axis=1)
        return 0.5 * sq

    def point_grads(self, w, X, y):
        return w - X

    def batch_mean_grads(self, W, X, y):
        return np.atleast_2d(W) - X.mean(axis=0)


@dataclass(frozen=True)
class LogisticLoss(LossModel):
    """l(w, (x, y)) = log(1 + exp(-y <w, x>)) with labels in {-1, +1}."""

    kind = "logistic"

    def raw_losses(self, W, X, y):
        return -log_expit(y * (np.atleast_2d(W) @ X.T))

    def point_grads(self, w, X, y):
        return (-y * expit(-y * (X @ w)))[:, None] * X

    def batch_mean_grads(self, W, X, y):
        coef = -y * expit(-y * (np.atleast_2d(W) @ X.T))
        return coef @ X / X.shape[0]


@dataclass(frozen=True)
class LinearLoss(LossModel):
    """l(w, (x, y)) = -y <w, x>; affine in w, so its gradient never changes."""

    kind = "linear"

    def raw_losses(self, W, X, y):
        return -(np.atleast_2d(W) @ X.T) * y

    def point_grads(self, w, X, y):
        return -y[:, None] * X

    def batch_mean_grads(self, W, X, y):
        g = -(y @ X) / X.shape[0]
        return np.broadcast_to(g, np.atleast_2d(W).shape).copy()


@dataclass(frozen=True)
class SmallMLP(LossModel):
    """One tanh hidden layer, scalar output, squared loss.

    Parameters are packed as [W1 (hidden x inputs), b1, w2, b2].
    """

    inputs: int = 1
    hidden: int = 8

    kind = "small-mlp"

    def __post_init__(self):
        super().__post_init__()
        if not 1 <= self.hidden <= 64:
            raise ValueError("hidden units must be in [1, 64]")
        if self.dim != self.param_count(self.inputs, self.hidden):
            raise ValueError("dim must equal hidden*inputs + 2*hidden + 1")

    @staticmethod
    def param_count(inputs: int, hidden: int) -> int:
        return hidden * inputs + 2 * hidden + 1

    @classmethod
    def build(cls, inputs: int, hidden: int, **kw) -> "SmallMLP":
        return cls(dim=cls.param_count(inputs, hidden), inputs=inputs, hidden=hidden, **kw)

    def _unpack(self, W):
        h, p = self.hidden, self.inputs
        W = np.atleast_2d(W)
        W1 = W[:, : h * p].reshape(-1, h, p)
        b1 = W[:, h * p : h * p + h]
        w2 = W[:, h * p + h : h * p + 2 * h]
        b2 = W[:, -1]
        return W1, b1, w2, b2

    def _forward(self, W, X):
        W1, b1, w2, b2 = self._unpack(W)
        act = np.tanh(np.einsum("khp,np->knh", W1, X) + b1[:, None, :])
        out = np.einsum("knh,kh->kn", act, w2) + b2[:, None]
        return act, out

    def raw_losses(self, W, X, y):
        _, out = self._forward(W, X)
        r = out - y
        return 0.5 * r * r

    def _grads(self, W, X, y):
        W1, b1, w2, b2 = self._unpack(W)
        act, out = self._forward(W, X)
        r = out - y  # (k, n)
        d_w2 = r[..., None] * act
        d_pre = r[..., None] * w2[:, None, :] * (1.0 - act * act)  # (k, n, h)
        d_W1 = d_pre[..., None] * X[None, :, None, :]
        k, n = r.shape
        return np.concatenate(
            [d_W1.reshape(k, n, -1), d_pre, d_w2, r[..., None]], axis=2
        )

    def point_grads(self, w, X, y):
        return self._grads(w, X, y)[0]

    def batch_mean_grads(self, W, X, y):
        return self._grads(W, X, y).mean(axis=1)


# ------------------------------------------------------------- loss reductions


def empirical_loss(model: LossModel, w, s: Dataset):
    """Average (clipped, if configured) loss of w on s; batched over rows of w."""
    if s.n == 0:
        raise ValueError("empirical loss of an empty dataset")
    vals = model.eval_losses(w, s.X, s.y).mean(axis=1)
    return float(vals[0]) if np.ndim(w) == 1 else vals


def minibatch_grad(model: LossModel, w, s: Dataset, J, clipped: Optional[bool] = None) -> np.ndarray:
    """(1/|J|) sum_{i in J} g(w, z_i)."""
    J = np.asarray(J, dtype=int).reshape(-1)
    if J.size == 0:
        raise ValueError("empty minibatch")
    if J.min() < 0 or J.max() >= s.n:
        raise IndexError(f"minibatch index out of range [0, {s.n})")
    return model.train_grads(np.asarray(w, dtype=float), s.X[J], s.y[J], clipped).mean(axis=0)


def subgaussian_constant(model: LossModel) -> float:
    """R = B/2 for clipped losses, else the user-supplied constant."""
    R = model.R
    if R is None:
        raise ValueError(
            "unbounded loss without a subgaussian constant: set clip or subgaussian_R"
        )
    return float(R)


# ---------------------------------------------------------- population gradient


class PopulationGradient:
    """Callable w -> E[g(w, Z)], vectorised over leading axes of w."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], mode: str, dim: int):
        self._fn = fn
        self.mode = mode
        self.dim = dim

    def __call__(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        flat = W.reshape(-1, self.dim)
        return self._fn(flat).reshape(W.shape)


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(96)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2 * np.pi)


def _logistic_population_grad(spec: LogisticTwoGaussians):
    # E[x f(w.x)] = m E f(u) + s^2 w E f'(u), u ~ N(w.m, s^2 |w|^2), by Stein's identity.
    m = spec.class_mean
    s2 = spec.feature_sd**2

    def fn(W):
        loc = W @ m
        scale = np.sqrt(s2 * np.sum(W * W, axis=1))
        u = loc[:, None] + scale[:, None] * _GH_NODES
        f = expit(-u)
        ef = f @ _GH_WEIGHTS
        efp = -(f * (1.0 - f)) @ _GH_WEIGHTS
        return -(ef[:, None] * m + s2 * efp[:, None] * W)

    return fn


def population_gradient(
    model: LossModel,
    spec: DistributionSpec,
    mode: str = "analytic",
    n_pop: int = 100_000,
    rng: Optional[RngLike] = None,
) -> PopulationGradient:
    """Build a population-gradient handle.

    ``analytic`` covers quadratic/linear-regression and mean estimation,
    ``quadrature`` covers logistic/two-Gaussians (exact up to Gauss-Hermite
    error), and ``plug-in`` averages the training gradient over one fixed
    oracle sample of size ``n_pop`` drawn from ``rng``.
    """
    d = model.dim
    if mode == "analytic":
        clipped_train = model.train_on_clipped and model.clip is not None
        if isinstance(model, QuadraticLoss) and isinstance(spec, LinearRegressionGaussian) and not clipped_train:
            A, w_star = spec.second_moment(), spec.true_w
            return PopulationGradient(lambda W: (W - w_star) @ A.T, mode, d)
        if isinstance(model, MeanLoss) and isinstance(spec, MeanEstimation) and not clipped_train:
            mean = spec.mean
            return PopulationGradient(lambda W: W - mean, mode, d)
        raise NoAnalyticGradient("no analytic population gradient")
    if mode == "quadrature":
        if (
            isinstance(model, LogisticLoss)
            and isinstance(spec, LogisticTwoGaussians)
            and not (model.train_on_clipped and model.clip is not None)
        ):
            return PopulationGradient(_logistic_population_grad(spec), mode, d)
        raise NoAnalyticGradient("no quadrature population gradient for this model")
    if mode == "plug-in":
        if rng is None:
            raise ValueError("plug-in population gradient needs an rng")
        Xo, yo = spec.sample(n_pop, as_generator(rng))
        return PopulationGradient(lambda W: model.train_mean_grads(W, Xo, yo), mode, d)
    raise ValueError(f"unknown population-gradient mode {mode!r}")


def population_grad(model, spec, w, mode: str = "analytic", n_pop: int = 100_000, rng=None) -> np.ndarray:
    return population_gradient(model, spec, mode, n_pop, rng)(np.asarray(w, dtype=float))


# -------------------------------------------------------------------- smoothness


@dataclass(frozen=True)
class SmoothnessReport:
    max_ratio: float
    mu: Optional[float]
    trials: int
    violated: bool


def verify_smoothness(
    model: LossModel,
    trials: int,
    radius: float,
    rng: RngLike,
    data: Optional[Dataset] = None,
    popgrad: Optional[PopulationGradient] = None,
) -> SmoothnessReport:
    """Max of ||g(w,z) - g(w+u,z)|| / ||u|| over sampled (w, u, z).

    With ``popgrad`` the ratio is taken on the population gradient instead of
    pointwise gradients (then ``data`` is not needed).
    """
    gen = as_generator(rng)
    if popgrad is None and (data is None or data.n == 0):
        raise ValueError("pointwise smoothness check needs data points")
    worst = 0.0
    for _ in range(trials):
        w = radius * gen.standard_normal(model.dim)
        u = radius * gen.standard_normal(model.dim)
        nu = np.linalg.norm(u)
        if nu == 0:
            continue
        if popgrad is None:
            i = int(gen.integers(data.n))
            X, y = data.X[i : i + 1], data.y[i : i + 1]
            diff = model.point_grads(w, X, y)[0] - model.point_grads(w + u, X, y)[0]
        else:
            diff = popgrad(w) - popgrad(w + u)
        worst = max(worst, float(np.linalg.norm(diff) / nu))
    mu = model.smoothness_mu
    violated = mu is not None and worst > mu * (1 + 1e-6)
    return SmoothnessReport(worst, mu, trials, violated)
