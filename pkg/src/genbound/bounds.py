"""Assembly of generalization bounds from pathwise estimates.

Conventions: a run has T update steps, per-step perturbation covariances
Sigma_1..Sigma_T, the step-t sensitivity uses the cumulative covariance
sum_{k<t} Sigma_k (zero at t = 1), and the value-sensitivity term uses the
final cumulative covariance sum_{k<=T} Sigma_k at the returned iterate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .numerics import CovSpec, Diagonal, Full, Isotropic, accumulate_cov

__all__ = [
    "SigmaSchedule",
    "StepRow",
    "BoundReport",
    "CorollaryInputs",
    "DegeneratePerturbation",
    "log_grid",
    "theorem1_bound",
    "corollary1_bound",
    "sgld_bound",
    "theorem3_bound",
    "generic_output_bound",
    "optimize_sigma",
    "PER_STEP_COLUMNS",
]

PER_STEP_COLUMNS = ("t", "eta", "sigma2", "gamma_hat", "gamma_se", "v_hat", "v_se", "contribution")
CONVENTION = "steps 1..T, Delta at sum_{k<=T} Sigma_k (perturbed-path recursion)"


class DegeneratePerturbation(ValueError):
    pass


def log_grid(lo: float, hi: float, per_decade: int = 10) -> np.ndarray:
    """Logarithmic grid from lo to hi inclusive with ``per_decade`` points per decade."""
    if not 0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")
    count = int(round(math.log10(hi / lo) * per_decade)) + 1
    return np.logspace(math.log10(lo), math.log10(hi), max(count, 1))


@dataclass(frozen=True, eq=False)
class SigmaSchedule:
    per_step: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_step", tuple(self.per_step))
        if not self.per_step:
            raise ValueError("empty sigma schedule")
        d = self.per_step[0].dim
        if any(c.dim != d for c in self.per_step):
            raise ValueError("dimension mismatch inside sigma schedule")

    @classmethod
    def isotropic(cls, sigma, T: int, dim: int) -> "SigmaSchedule":
        """Per-step isotropic noise with standard deviation(s) ``sigma``."""
        s = np.broadcast_to(np.asarray(sigma, dtype=float), (T,))
        return cls(tuple(Isotropic(float(v) ** 2, dim) for v in s))

    @classmethod
    def constant(cls, cov: CovSpec, T: int) -> "SigmaSchedule":
        return cls((cov,) * T)

    @property
    def T(self) -> int:
        return len(self.per_step)

    @property
    def dim(self) -> int:
        return self.per_step[0].dim

    @property
    def is_isotropic(self) -> bool:
        return all(isinstance(c, Isotropic) for c in self.per_step)

    @cached_property
    def _cumulative(self) -> tuple:
        first = self.per_step[0]
        if all(c is first for c in self.per_step):
            return tuple(first.scaled(float(t)) if t else accumulate_cov([], first.dim) for t in range(self.T + 1))
        if self.is_isotropic:
            s2 = np.concatenate([[0.0], np.cumsum([c.s2 for c in self.per_step])])
            return tuple(Isotropic(float(v), self.dim) for v in s2)
        out = [accumulate_cov([], self.dim)]
        for c in self.per_step:
            out.append(accumulate_cov([out[-1], c]))
        return tuple(out)

    def cumulative(self, t: int) -> CovSpec:
        """sum_{k<t} Sigma_k for 1-indexed t in 1..T+1."""
        if not 1 <= t <= self.T + 1:
            raise IndexError(t)
        return self._cumulative[t - 1]

    @property
    def final_cumulative(self) -> CovSpec:
        return self._cumulative[self.T]

    @property
    def step_sigma2(self) -> np.ndarray:
        """Per-step average variance trace(Sigma_t)/d (the exact sigma_t^2 when isotropic)."""
        return np.array([c.trace() / c.dim for c in self.per_step])

    def cumulative_factors(self) -> np.ndarray:
        """(T, d, d) factors of sum_{k<t} Sigma_k for t = 1..T."""
        return np.stack([self._cumulative[t].factor() for t in range(self.T)])

    def step_factors(self) -> np.ndarray:
        return np.stack([c.factor() for c in self.per_step])

    def descriptor(self) -> str:
        first = self.per_step[0]
        if all(c is first or c.describe() == first.describe() for c in self.per_step):
            return f"const:{first.describe()}"
        return "varying:" + first.describe() + ".."


@dataclass
class StepRow:
    t: int
    eta: float
    sigma2: float
    gamma_hat: float
    gamma_se: float
    v_hat: float
    v_se: float
    contribution: float


@dataclass
class BoundReport:
    kind: str
    total: float
    info_term: float
    sensitivity_term: float
    R: float
    n: int
    info_se: float = 0.0
    sensitivity_se: float = 0.0
    total_se: float = 0.0
    mi_bound: Optional[float] = None
    schedule: str = ""
    convention: str = CONVENTION
    per_step: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BoundReport":
        data = dict(data)
        data["per_step"] = [StepRow(**r) for r in data.get("per_step", [])]
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def per_step_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(PER_STEP_COLUMNS)
        for row in self.per_step:
            writer.writerow([repr(getattr(row, c)) if isinstance(getattr(row, c), float) else getattr(row, c)
                             for c in PER_STEP_COLUMNS])
        return buf.getvalue()


@dataclass(frozen=True)
class CorollaryInputs:
    R: float
    eta: float
    T: int
    n: int
    mu: float
    v: float
    b: int
    sigma: float
    d: int

    def __post_init__(self):
        for name in ("R", "eta", "T", "n", "b", "d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mu < 0 or self.v < 0:
            raise ValueError("mu and v must be nonnegative")
        if not self.sigma > 0:
            raise DegeneratePerturbation("sigma must be positive")


def _floor(values, name, flags):
    values = np.asarray(values, dtype=float)
    if np.any(values < 0):
        flags.append(f"floored-negative-{name}")
        values = np.maximum(values, 0.0)
    return values


def _se_array(se, T):
    return np.zeros(T) if se is None else np.asarray(se, dtype=float)


def _sqrt_se(value: float, se_of_square: float) -> float:
    # delta method for sqrt(X) given se(X)
    return se_of_square / (2 * value) if value > 0 else 0.0


def _assemble(kind, contributions, per_step, sens, sens_se, R, n, info_sum_se, schedule,
              flags, extras, mi_scale):
    """info = sqrt(sum contributions); mi_scale converts the sum into the MI bound."""
    mi = float(np.sum(contributions)) * mi_scale if mi_scale else None
    if mi is not None:
        info = math.sqrt(2 * R * R * mi / n)
    else:
        info = math.sqrt(float(np.sum(contributions)))
    info_se = _sqrt_se(info, info_sum_se)
    total = info + sens
    return BoundReport(
        kind=kind, total=total, info_term=info, sensitivity_term=sens, R=R, n=n,
        info_se=info_se, sensitivity_se=sens_se, total_se=math.hypot(info_se, sens_se),
        mi_bound=mi, schedule=schedule, per_step=per_step, flags=flags, extras=extras,
    )


def _delta_term(delta_diff):
    if delta_diff is None:
        return 0.0, 0.0
    value = getattr(delta_diff, "value", delta_diff)
    se = getattr(delta_diff, "std_error", 0.0)
    return abs(float(value)), float(se) if np.isfinite(se) else 0.0


def theorem1_bound(
    gamma, v, delta_diff, sched: SigmaSchedule, etas, R: float, n: int,
    gamma_se=None, v_se=None, info_sum_se: Optional[float] = None, delta_diff_alt=None,
) -> BoundReport:
    """sqrt((4R^2/n) sum_t (eta_t^2/sigma_t^2)(Gamma_t + V_t)) + |Delta(S') - Delta(S)|.

    ``delta_diff`` is an Estimate (or float) of E[Delta(W, S') - Delta(W, S)] at
    the final cumulative variance. ``info_sum_se`` overrides the standard error
    of the summed contributions (default: independent per-step errors).
    """
    etas = np.asarray(getattr(etas, "etas", etas), dtype=float)
    T = etas.size
    if not sched.is_isotropic:
        raise ValueError("theorem1_bound needs an isotropic schedule; use theorem3_bound")
    if sched.T != T:
        raise ValueError("schedule and step lengths differ")
    s2 = np.array([c.s2 for c in sched.per_step])
    if np.any(s2 <= 0):
        raise DegeneratePerturbation("degenerate perturbation step")
    flags: list = []
    gamma = _floor(gamma, "gamma", flags)
    v = _floor(v, "v", flags)
    gse, vse = _se_array(gamma_se, T), _se_array(v_se, T)
    coef = (4 * R * R / n) * etas**2 / s2
    contrib = coef * (gamma + v)
    if info_sum_se is None:
        info_sum_se = float(np.sqrt(np.sum(coef**2 * (gse**2 + vse**2))))
    rows = [StepRow(t + 1, float(etas[t]), float(s2[t]), float(gamma[t]), float(gse[t]),
                    float(v[t]), float(vse[t]), float(contrib[t])) for t in range(T)]
    sens, sens_se = _delta_term(delta_diff)
    extras = {}
    if delta_diff_alt is not None:
        alt, _ = _delta_term(delta_diff_alt)
        extras["delta_term_alt_convention"] = alt
        extras["delta_term_convention_gap"] = alt - sens
    # MI bound = sum_t (2 eta^2 / sigma^2)(Gamma + V) = sum(contrib) * n / (2 R^2)
    return _assemble("theorem1", contrib, rows, sens, sens_se, R, n, info_sum_se,
                     sched.descriptor(), flags, extras, n / (2 * R * R))


def corollary1_bound(inp: CorollaryInputs, with_steps: bool = True) -> BoundReport:
    """Explicit-constant smooth-loss bound with constant eta, b, sigma and single-pass batches.

    ``with_steps=False`` skips the per-step table (useful for very large T).
    """
    R, eta, T, n, mu, v, b, s, d = (inp.R, inp.eta, inp.T, inp.n, inp.mu, inp.v, inp.b, inp.sigma, inp.d)
    s2 = s * s
    rows = []
    if with_steps:
        t = np.arange(1, T + 1, dtype=float)
        gamma = mu * mu * d * s2 * t  # Gamma at cumulative sigma^2 t, bounded by mu^2 d sigma^2 t
        coef = 4 * R * R * eta * eta / (n * s2)
        contrib = coef * (gamma + v / b)
        rows = [StepRow(int(k), eta, s2, float(g), 0.0, float(v / b), 0.0, float(c))
                for k, g, c in zip(t, gamma, contrib)]
    gamma_sum = mu * mu * d * T * (T + 1) / 2
    var_sum = v * T / (b * s2)
    info = math.sqrt(4 * R * R * eta * eta / n * (gamma_sum + var_sum))
    sens = mu * s2 * d * T
    trail = {
        "gamma_step_bound": "mu^2 d sigma^2 t",
        "variance_step_bound": "v / b",
        "delta_bound_each": "mu sigma^2 d T / 2",
        "sum_gamma_over_sigma2": gamma_sum,
        "sum_variance_over_sigma2": var_sum,
        "info_term_formula": "sqrt((4 R^2 eta^2 / n) (mu^2 d T (T+1)/2 + v T / (b sigma^2)))",
        "sensitivity_formula": "mu sigma^2 d T",
    }
    return BoundReport(
        kind="corollary1", total=info + sens, info_term=info, sensitivity_term=sens, R=R, n=n,
        mi_bound=info * info * n / (2 * R * R), schedule=f"const:iso({s2!r})",
        per_step=rows, extras={"simplification": trail, "inputs": asdict(inp)},
    )


def sgld_bound(v, sched: SigmaSchedule, etas, R: float, n: int, v_se=None,
               info_sum_se: Optional[float] = None) -> BoundReport:
    """sqrt((R^2/n) sum_t (eta_t^2/sigma_t^2) V_t) for SGLD with noise schedule ``sched``."""
    etas = np.asarray(getattr(etas, "etas", etas), dtype=float)
    T = etas.size
    if sched.T != T or not sched.is_isotropic:
        raise ValueError("sgld_bound needs an isotropic schedule of length T")
    s2 = np.array([c.s2 for c in sched.per_step])
    if np.any(s2 <= 0):
        raise DegeneratePerturbation("degenerate perturbation step")
    flags: list = []
    v = _floor(v, "v", flags)
    vse = _se_array(v_se, T)
    coef = (R * R / n) * etas**2 / s2
    contrib = coef * v
    if info_sum_se is None:
        info_sum_se = float(np.sqrt(np.sum(coef**2 * vse**2)))
    rows = [StepRow(t + 1, float(etas[t]), float(s2[t]), 0.0, 0.0, float(v[t]), float(vse[t]),
                    float(contrib[t])) for t in range(T)]
    return _assemble("sgld", contrib, rows, 0.0, 0.0, R, n, info_sum_se, sched.descriptor(),
                     flags, {}, None)


def _is_spd(cov: CovSpec) -> bool:
    if isinstance(cov, Isotropic):
        return cov.s2 > 0
    if isinstance(cov, Diagonal):
        return bool(np.all(cov.diag > 0))
    if isinstance(cov, Full):
        return bool(np.all(np.diag(cov.factor()) > 0))
    return False


def theorem3_bound(
    gamma_w, v_w, delta_diff, sched: SigmaSchedule, etas, R: float, n: int,
    gamma_se=None, v_se=None, info_sum_se: Optional[float] = None,
) -> BoundReport:
    """Covariance-weighted bound sqrt((4R^2/n) sum_t eta_t^2 (Gamma_t + V_t)) + |Delta diff|.

    ``gamma_w`` and ``v_w`` are already weighted by Sigma_t^{-1}.
    """
    etas = np.asarray(getattr(etas, "etas", etas), dtype=float)
    T = etas.size
    if sched.T != T:
        raise ValueError("schedule and step lengths differ")
    if not all(_is_spd(c) for c in sched.per_step):
        raise DegeneratePerturbation("non-SPD perturbation covariance")
    flags: list = []
    gamma_w = _floor(gamma_w, "gamma", flags)
    v_w = _floor(v_w, "v", flags)
    gse, vse = _se_array(gamma_se, T), _se_array(v_se, T)
    coef = (4 * R * R / n) * etas**2
    contrib = coef * (gamma_w + v_w)
    if info_sum_se is None:
        info_sum_se = float(np.sqrt(np.sum(coef**2 * (gse**2 + vse**2))))
    s2 = sched.step_sigma2
    rows = [StepRow(t + 1, float(etas[t]), float(s2[t]), float(gamma_w[t]), float(gse[t]),
                    float(v_w[t]), float(vse[t]), float(contrib[t])) for t in range(T)]
    sens, sens_se = _delta_term(delta_diff)
    return _assemble("theorem3", contrib, rows, sens, sens_se, R, n, info_sum_se,
                     sched.descriptor(), flags, {}, n / (2 * R * R))


def generic_output_bound(
    diffs: np.ndarray, cov_grid: Sequence[CovSpec], delta_diffs: Sequence, R: float, n: int,
) -> BoundReport:
    """inf over the grid of sqrt((R^2/n) mean ||W - W'||^2_{Sigma^-1}) + |Delta_Sigma diff|.

    ``diffs`` holds one row W - W' per paired run; ``delta_diffs`` one Estimate
    per grid covariance. The report holds the grid minimum; the whole curve is
    in ``extras["curve"]``.
    """
    diffs = np.atleast_2d(np.asarray(diffs, dtype=float))
    if not len(cov_grid):
        raise ValueError("empty covariance grid")
    if diffs.shape[0] < 2:
        raise ValueError("need at least two paired runs")
    if len(delta_diffs) != len(cov_grid):
        raise ValueError("one Delta estimate per grid covariance")
    K = diffs.shape[0]
    curve = []
    for cov, dd in zip(cov_grid, delta_diffs):
        q = cov.weighted_sqnorm(diffs)
        mean_q = float(q.mean())
        se_q = float(q.std(ddof=1) / math.sqrt(K))
        first = math.sqrt(R * R / n * mean_q)
        first_se = _sqrt_se(first, R * R / n * se_q)
        sens, sens_se = _delta_term(dd)
        curve.append({
            "cov": cov.describe(), "sigma2": cov.trace() / cov.dim, "first_term": first,
            "first_se": first_se, "delta_term": sens, "delta_se": sens_se, "total": first + sens,
            "total_se": math.hypot(first_se, sens_se), "mean_sqdist": mean_q,
        })
    best = min(range(len(curve)), key=lambda i: (curve[i]["total"], curve[i]["sigma2"], i))
    c = curve[best]
    return BoundReport(
        kind="generic", total=c["total"], info_term=c["first_term"], sensitivity_term=c["delta_term"],
        R=R, n=n, info_se=c["first_se"], sensitivity_se=c["delta_se"], total_se=c["total_se"],
        schedule=c["cov"], convention="single perturbation of the output", extras={"curve": curve, "best_index": best},
    )


def _final_size(point) -> float:
    if isinstance(point, SigmaSchedule):
        return point.final_cumulative.trace()
    if isinstance(point, CovSpec):
        return point.trace()
    return float(point)


def optimize_sigma(evaluator: Callable, grid: Sequence):
    """Grid argmin of ``evaluator(point).total``; ties go to the smaller final cumulative variance.

    Returns ``(best_point, best_report, reports)``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty sigma grid")
    reports = [evaluator(p) for p in grid]
    best = min(range(len(grid)), key=lambda i: (reports[i].total, _final_size(grid[i]), i))
    return grid[best], reports[best], reports
