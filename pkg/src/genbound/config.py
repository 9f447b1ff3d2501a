"""Experiment configuration: a versioned JSON document that round-trips exactly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .bounds import log_grid
from .numerics import RandomSource
from .optimizer import BATCH_KINDS, StepSchedule
from .problems import (
    LinearLoss,
    LinearRegressionGaussian,
    LogisticLoss,
    LogisticTwoGaussians,
    LossModel,
    MeanEstimation,
    MeanLoss,
    QuadraticLoss,
    SmallMLP,
    population_gradient,
)

SCHEMA_VERSION = 1
EXPERIMENT_KINDS = ("bound-vs-gap", "rate-scan", "sgd-vs-sgld", "aniso-compare", "kl-verify", "generic-bound")


class ConfigError(ValueError):
    pass


def _build(cls, data: Optional[dict]):
    data = {} if data is None else dict(data)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ProblemConfig:
    distribution: dict = field(default_factory=lambda: {
        "kind": "logistic-two-gaussians", "mean_separation": 2.0, "feature_sd": 1.0, "dim": 2})
    loss: dict = field(default_factory=lambda: {"kind": "logistic", "clip": 1.0})
    popgrad: dict = field(default_factory=lambda: {"mode": "quadrature", "n_pop": 100000})

    def build_spec(self):
        d = dict(self.distribution)
        kind = d.pop("kind", None)
        try:
            if kind == "logistic-two-gaussians":
                return LogisticTwoGaussians(float(d["mean_separation"]), float(d["feature_sd"]), int(d.get("dim", 2)))
            if kind == "linreg-gaussian":
                if "eigenvalues" in d:
                    cov = np.diag(np.asarray(d["eigenvalues"], dtype=float))
                else:
                    cov = np.asarray(d["feature_cov"], dtype=float)
                return LinearRegressionGaussian(cov, np.asarray(d["true_w"], dtype=float), float(d.get("noise_sd", 0.0)))
            if kind == "mean-estimation":
                return MeanEstimation(np.asarray(d["mean"], dtype=float), float(d["sd"]))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"bad distribution config: {err}") from err
        raise ConfigError(f"unknown distribution kind {kind!r}")

    def build_model(self, dim: int) -> LossModel:
        d = dict(self.loss)
        kind = d.pop("kind", None)
        common = {k: d.pop(k) for k in ("clip", "train_on_clipped", "smoothness_mu", "subgaussian_R", "variance_cap") if k in d}
        classes = {"quadratic": QuadraticLoss, "logistic": LogisticLoss, "mean": MeanLoss, "linear": LinearLoss}
        try:
            if kind == "small-mlp":
                return SmallMLP.build(dim, int(d.pop("hidden", 8)), **common)
            if kind in classes and not d:
                return classes[kind](dim, **common)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad loss config: {err}") from err
        raise ConfigError(f"bad loss config {self.loss!r}")

    def build_popgrad(self, model, spec, source: RandomSource):
        pg = dict(self.popgrad)
        return population_gradient(model, spec, pg.get("mode", "analytic"), int(pg.get("n_pop", 100000)),
                                   source.child("population-oracle"))


@dataclass
class OptimizerConfig:
    eta_rule: str = "constant"
    eta: float = 0.5
    batch_kind: str = "single-pass-partition"
    batch_size: int = 1
    passes: float = 1.0
    init: str = "zero"
    init_sd: float = 1.0

    def steps_for(self, n: int) -> int:
        if self.batch_kind == "single-pass-partition":
            if n % self.batch_size:
                raise ConfigError("single-pass schedule needs batch_size dividing n")
            return n // self.batch_size
        return max(1, int(round(self.passes * n / self.batch_size)))

    def step_schedule(self, n: int) -> StepSchedule:
        T = self.steps_for(n)
        if self.eta_rule == "constant":
            return StepSchedule.constant(self.eta, T)
        if self.eta_rule == "one-over-n":
            return StepSchedule.one_over_n(self.eta, n, T)
        raise ConfigError(f"unknown eta rule {self.eta_rule!r}")


@dataclass
class SigmaGridConfig:
    lo: float = 1e-3
    hi: float = 1.0
    per_decade: int = 10
    values: Optional[list] = None

    def values_array(self) -> np.ndarray:
        if self.values is not None:
            vals = np.asarray(self.values, dtype=float)
            if vals.size == 0 or np.any(vals <= 0):
                raise ConfigError("sigma grid values must be positive")
            return vals
        try:
            return log_grid(self.lo, self.hi, self.per_decade)
        except ValueError as err:
            raise ConfigError(str(err)) from err


@dataclass
class MCSizes:
    m_gamma: int = 4
    m_delta: int = 200
    antithetic: bool = False


@dataclass
class ExperimentConfig:
    kind: str = "bound-vs-gap"
    seed: int = 12345
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    n_values: list = field(default_factory=lambda: [100])
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sigma_grid: SigmaGridConfig = field(default_factory=SigmaGridConfig)
    mc: MCSizes = field(default_factory=MCSizes)
    trials: int = 200
    test_mode: str = "fresh-S-prime"
    n_test: Optional[int] = None
    params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.optimizer.batch_kind not in BATCH_KINDS:
            raise ConfigError(f"unknown batch kind {self.optimizer.batch_kind!r}")
        if self.kind in ("bound-vs-gap", "sgd-vs-sgld", "generic-bound", "aniso-compare") and self.trials < 2:
            raise ConfigError("need at least two trials")
        if self.test_mode not in ("fresh-S-prime", "large-test"):
            raise ConfigError(f"unknown test mode {self.test_mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        try:
            nested = {
                "problem": _build(ProblemConfig, data.pop("problem", None)),
                "optimizer": _build(OptimizerConfig, data.pop("optimizer", None)),
                "sigma_grid": _build(SigmaGridConfig, data.pop("sigma_grid", None)),
                "mc": _build(MCSizes, data.pop("mc", None)),
            }
            return _build(cls, {**data, **nested})
        except TypeError as err:
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}") from err
        return cls.from_json(text)

    def source(self) -> RandomSource:
        return RandomSource(int(self.seed))


def _quadratic_problem(eigenvalues, R: Optional[float] = None, clip: Optional[float] = None) -> dict:
    loss: dict[str, Any] = {"kind": "quadratic"}
    if clip is not None:
        loss["clip"] = clip
    else:
        loss["subgaussian_R"] = R
    return {
        "distribution": {"kind": "linreg-gaussian", "eigenvalues": list(eigenvalues),
                         "true_w": [1.0] * len(eigenvalues), "noise_sd": 1.0},
        "loss": loss,
        "popgrad": {"mode": "analytic"},
    }


def default_config(kind: str) -> ExperimentConfig:
    """Desk-scale defaults used when a command runs without a config file."""
    base: dict[str, Any] = {"kind": kind}
    if kind == "bound-vs-gap":
        base["sigma_grid"] = {"lo": 0.01, "hi": 10.0, "per_decade": 8}
    elif kind == "kl-verify":
        base["trials"] = 100
    elif kind == "sgd-vs-sgld":
        base["sigma_grid"] = {"values": [0.001, 0.1, 1.0]}
    elif kind == "aniso-compare":
        base.update(problem=_quadratic_problem([100.0, 1.0], 1.0), n_values=[50], trials=50,
                    optimizer={"eta": 0.005}, sigma_grid={"lo": 1e-3, "hi": 1.0, "per_decade": 3},
                    mc={"m_delta": 100}, params={"refine": 10})
    elif kind == "generic-bound":
        base.update(problem=_quadratic_problem([5.0, 4.0, 3.0, 2.0, 1.0], clip=4.0), n_values=[100], trials=100,
                    optimizer={"eta": 0.02}, sigma_grid={"lo": 1e-3, "hi": 10.0, "per_decade": 5})
    return ExperimentConfig.from_dict(base)
