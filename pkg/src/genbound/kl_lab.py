"""Numerical checks of the smoothing KL inequality for finitely supported laws.

For discrete X and Y and Gaussian noise eps ~ N(0, Sigma), the law of X + eps is
a Gaussian mixture. We integrate KL(P_{X+eps} || P_{Y+eps}) on a grid and
compare it with the coupling bound (1/2) E||X - Y||^2_{Sigma^{-1}}, both for the
independent coupling and for the optimal (squared 2-Wasserstein) coupling.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import linprog
from scipy.special import logsumexp

from .numerics import CovSpec, Diagonal, Full, Isotropic, RngLike, as_generator

__all__ = [
    "DiscreteLaw",
    "GridSpec",
    "GridTooCoarse",
    "LemmaInstance",
    "LemmaReport",
    "smoothed_density",
    "log_smoothed_density",
    "quadrature_kl",
    "coupling_bound",
    "rotate_to_diagonal",
    "default_grid",
    "lemma_check",
    "write_lemma_csv",
    "LEMMA_CSV_COLUMNS",
]

MAX_ATOMS = 8
LEMMA_CSV_COLUMNS = ("instance_id", "kl", "independent_bound", "optimal_bound", "slack")


class GridTooCoarse(ValueError):
    def __init__(self, diff: float, points: int):
        super().__init__(
            f"quadrature grid too coarse: refinement changed KL by {diff:.3g}; "
            f"try points_per_dim >= {2 * points}"
        )
        self.suggested = 2 * points


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    atoms: np.ndarray  # (k, d)
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if atoms.shape[0] != w.size or w.size == 0:
            raise ValueError("need one weight per atom")
        if w.size > MAX_ATOMS:
            raise ValueError(f"at most {MAX_ATOMS} atoms supported")
        if atoms.shape[1] not in (1, 2):
            raise ValueError("only d in {1, 2} is supported")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point(cls, x) -> "DiscreteLaw":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :], [1.0])

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def k(self) -> int:
        return self.weights.size

    def transformed(self, M: np.ndarray) -> "DiscreteLaw":
        return DiscreteLaw(self.atoms @ M.T, self.weights)


@dataclass(frozen=True, eq=False)
class GridSpec:
    lo: np.ndarray
    hi: np.ndarray
    points_per_dim: int

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        d = self.lo.size
        minimum = 256 if d == 1 else 128
        if self.points_per_dim < minimum:
            raise ValueError(f"need at least {minimum} grid points per dimension for d={d}")

    def axes(self, points: Optional[int] = None):
        p = self.points_per_dim if points is None else points
        return [np.linspace(a, b, p) for a, b in zip(self.lo, self.hi)]

    def refined(self) -> "GridSpec":
        return GridSpec(self.lo, self.hi, 2 * self.points_per_dim - 1)


def _diag_variances(cov: CovSpec) -> np.ndarray:
    if isinstance(cov, Isotropic):
        return np.full(cov.dim, cov.s2)
    if isinstance(cov, Diagonal):
        return cov.diag
    raise TypeError("expected a diagonal covariance; rotate full covariances first")


def log_smoothed_density(law: DiscreteLaw, cov: CovSpec, x: np.ndarray) -> np.ndarray:
    """log sum_i w_i N(x; a_i, cov) for points x of shape (..., d)."""
    if cov.is_zero:
        raise ValueError("smoothing needs a nonzero covariance")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != law.dim and law.dim == 1:
        x = x[..., None]
    diff = x[..., None, :] - law.atoms  # (..., k, d)
    quad = cov.weighted_sqnorm(diff)
    if isinstance(cov, Full):
        logdet = 2 * np.sum(np.log(np.diag(cov.factor())))
    else:
        logdet = float(np.sum(np.log(_diag_variances(cov))))
    with np.errstate(divide="ignore"):
        logw = np.log(law.weights)
    comp = logw - 0.5 * quad - 0.5 * (law.dim * math.log(2 * math.pi) + logdet)
    return logsumexp(comp, axis=-1)


def smoothed_density(law: DiscreteLaw, cov: CovSpec, x) -> np.ndarray:
    out = np.exp(log_smoothed_density(law, cov, x))
    return float(out) if np.ndim(out) == 0 else out


def default_grid(p: DiscreteLaw, q: DiscreteLaw, cov: CovSpec, points: Optional[int] = None,
                 width: float = 8.0) -> GridSpec:
    """Box covering every atom of both laws by ``width`` smoothing deviations."""
    sd = np.sqrt(_diag_variances(cov))
    atoms = np.vstack([p.atoms, q.atoms])
    lo = atoms.min(axis=0) - width * sd
    hi = atoms.max(axis=0) + width * sd
    if points is None:
        # keep the step below a quarter of the smallest deviation
        span = float(np.max((hi - lo) / sd))
        points = max(257 if p.dim == 1 else 129, int(4 * span) + 1)
        if p.dim == 2:
            points = min(points, 513)
    return GridSpec(lo, hi, points)


def rotate_to_diagonal(p: DiscreteLaw, q: DiscreteLaw, cov: Full):
    """Rotate atoms into the eigenbasis of ``cov``; KL and coupling costs are unchanged."""
    evals, evecs = np.linalg.eigh(cov.matrix())
    return p.transformed(evecs.T), q.transformed(evecs.T), Diagonal(evals)


def _integrate(p, q, cov, grid: GridSpec, points: int) -> float:
    axes = grid.axes(points)
    if p.dim == 1:
        x = axes[0][:, None]
    else:
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        x = np.stack([gx, gy], axis=-1)
    lp = log_smoothed_density(p, cov, x)
    lq = log_smoothed_density(q, cov, x)
    integrand = np.exp(lp) * (lp - lq)
    for ax in reversed(axes):
        integrand = trapezoid(integrand, ax, axis=-1)
    return float(integrand)


def quadrature_kl(p: DiscreteLaw, q: DiscreteLaw, cov: CovSpec, grid: Optional[GridSpec] = None,
                  tol: float = 1e-4, return_error: bool = False):
    """KL(P_{X+eps} || P_{Y+eps}) by the trapezoid rule.

    The error estimate is the change under grid refinement; above ``tol`` a
    :class:`GridTooCoarse` error carries a suggested resolution.
    """
    if p.dim != q.dim or p.dim != cov.dim:
        raise ValueError("dimension mismatch")
    if isinstance(cov, Full):
        p, q, cov = rotate_to_diagonal(p, q, cov)
    if grid is None:
        grid = default_grid(p, q, cov)
    coarse = _integrate(p, q, cov, grid, grid.points_per_dim)
    fine = _integrate(p, q, cov, grid, 2 * grid.points_per_dim - 1)
    err = abs(fine - coarse)
    if err > tol:
        raise GridTooCoarse(err, grid.points_per_dim)
    return (fine, err) if return_error else fine


def _cost_matrix(p: DiscreteLaw, q: DiscreteLaw, cov: CovSpec) -> np.ndarray:
    diff = p.atoms[:, None, :] - q.atoms[None, :, :]
    return 0.5 * cov.weighted_sqnorm(diff)


def optimal_coupling_cost(C: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Exact min over couplings of sum C_ij pi_ij via a transportation LP."""
    k, l = C.shape
    A_eq = np.zeros((k + l, k * l))
    for i in range(k):
        A_eq[i, i * l : (i + 1) * l] = 1.0
    for j in range(l):
        A_eq[k + j, j::l] = 1.0
    res = linprog(C.reshape(-1), A_eq=A_eq[:-1], b_eq=np.concatenate([a, b])[:-1],
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def permutation_coupling_cost(C: np.ndarray) -> float:
    """Brute force over permutation couplings; exact for uniform laws of equal size."""
    k = C.shape[0]
    return min(sum(C[i, s[i]] for i in range(k)) / k for s in itertools.permutations(range(k)))


def coupling_bound(p: DiscreteLaw, q: DiscreteLaw, cov: CovSpec, coupling: str = "independent") -> float:
    """(1/2) E||X - Y||^2_{Sigma^-1} under the independent or the optimal coupling."""
    if p.k > MAX_ATOMS or q.k > MAX_ATOMS:
        raise ValueError(f"supports larger than {MAX_ATOMS} atoms are not supported")
    C = _cost_matrix(p, q, cov)
    indep = float(p.weights @ C @ q.weights)
    if coupling == "independent":
        return indep
    if coupling == "brute-force-optimal":
        # the product plan is feasible, so cap LP round-off at its cost
        return min(optimal_coupling_cost(C, p.weights, q.weights), indep)
    raise ValueError(f"unknown coupling {coupling!r}")


@dataclass
class LemmaInstance:
    instance_id: int
    kl: float
    independent_bound: float
    optimal_bound: float
    quad_error: float
    cov: str

    @property
    def slack(self) -> float:
        return self.optimal_bound - self.kl


@dataclass
class LemmaReport:
    instances: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def max_slack(self) -> float:
        return max((i.slack for i in self.instances), default=0.0)

    @property
    def min_slack(self) -> float:
        return min((i.slack for i in self.instances), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.violations


def _random_law(gen, d, spread):
    k = int(gen.integers(1, 5))
    atoms = gen.uniform(-spread, spread, size=(k, d))
    weights = gen.dirichlet(np.ones(k))
    weights = weights / weights.sum()
    return DiscreteLaw(atoms, weights)


def lemma_check(trials: int, d: int = 1, sigma_range=(0.3, 3.0), rng: RngLike = 0, *,
                point_masses: bool = False, full_cov: bool = False, tol: float = 1e-6,
                spread: float = 2.0, inject_violation: bool = False) -> LemmaReport:
    """Check KL <= optimal-coupling bound + tol (and optimal <= independent) on random instances.

    In d = 2 covariances are diagonal, or full with ``full_cov`` (handled by
    rotation). ``inject_violation`` corrupts the first instance's bound, for
    exercising failure paths.
    """
    gen = as_generator(rng)
    report = LemmaReport(tol=tol)
    lo, hi = np.log(sigma_range[0]), np.log(sigma_range[1])
    for i in range(trials):
        if point_masses:
            p = DiscreteLaw.point(gen.uniform(-spread, spread, size=d))
            q = DiscreteLaw.point(gen.uniform(-spread, spread, size=d))
        else:
            p, q = _random_law(gen, d, spread), _random_law(gen, d, spread)
        sds = np.exp(gen.uniform(lo, hi, size=d))
        if d == 1:
            cov: CovSpec = Isotropic(float(sds[0] ** 2), 1)
        elif full_cov:
            angle = gen.uniform(0, np.pi)
            Q = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            cov = Full(Q @ np.diag(sds**2) @ Q.T)
        else:
            cov = Diagonal(sds**2)
        kl, err = quadrature_kl(p, q, cov, return_error=True)
        indep = coupling_bound(p, q, cov, "independent")
        opt = coupling_bound(p, q, cov, "brute-force-optimal")
        if inject_violation and i == 0:
            opt = kl - 1.0
        inst = LemmaInstance(i, kl, indep, opt, err, cov.describe())
        report.instances.append(inst)
        if kl > opt + tol or opt > indep + tol:
            report.violations.append(i)
    return report


def write_lemma_csv(report: LemmaReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LEMMA_CSV_COLUMNS)
        for inst in report.instances:
            writer.writerow([inst.instance_id, repr(inst.kl), repr(inst.independent_bound),
                             repr(inst.optimal_bound), repr(inst.slack)])
