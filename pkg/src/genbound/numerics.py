"""Covariance specs, Gaussian sampling, weighted norms and seeded randomness.

Three covariance variants are supported (isotropic, diagonal, full SPD). A zero
covariance is an exact ``Isotropic(0.0)``; it samples to the zero vector and is
never inverted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

__all__ = [
    "CovSpec",
    "Isotropic",
    "Diagonal",
    "Full",
    "RandomSource",
    "NoninvertibleCovariance",
    "as_generator",
    "zero_cov",
    "sample_gaussian",
    "weighted_sqnorm",
    "accumulate_cov",
    "cholesky_with_jitter",
]


class NoninvertibleCovariance(ValueError):
    pass


def cholesky_with_jitter(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with ``1e-10 * trace / d`` jitter."""
    matrix = np.asarray(matrix, dtype=float)
    try:
        return cholesky(matrix, lower=True)
    except LinAlgError:
        d = matrix.shape[0]
        jitter = 1e-10 * np.trace(matrix) / d
        if not jitter > 0:
            raise
        return cholesky(matrix + jitter * np.eye(d), lower=True)


class CovSpec:
    """Base class for Gaussian perturbation covariances of dimension ``dim``."""

    dim: int

    @property
    def is_zero(self) -> bool:
        raise NotImplementedError

    def matrix(self) -> np.ndarray:
        raise NotImplementedError

    def factor(self) -> np.ndarray:
        """Lower-triangular F with F F^T equal to the covariance."""
        raise NotImplementedError

    def apply_factor(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals ``z`` of shape (..., d) to draws F z."""
        raise NotImplementedError

    def weighted_sqnorm(self, x: np.ndarray) -> np.ndarray:
        """x^T Sigma^{-1} x along the last axis."""
        raise NotImplementedError

    def trace(self) -> float:
        return float(np.trace(self.matrix()))

    def scaled(self, c: float) -> "CovSpec":
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(
                f"dimension mismatch: covariance has d={self.dim}, got {x.shape[-1]}"
            )
        return x


@dataclass(frozen=True, eq=False)
class Isotropic(CovSpec):
    s2: float
    dim: int

    def __post_init__(self):
        if not (np.isfinite(self.s2) and self.s2 >= 0):
            raise ValueError(f"isotropic variance must be finite and >= 0, got {self.s2}")

    @property
    def is_zero(self) -> bool:
        return self.s2 == 0.0

    def matrix(self):
        return self.s2 * np.eye(self.dim)

    def factor(self):
        return np.sqrt(self.s2) * np.eye(self.dim)

    def apply_factor(self, z):
        z = self._check(z)
        if self.is_zero:
            return np.zeros_like(z)
        return np.sqrt(self.s2) * z

    def weighted_sqnorm(self, x):
        x = self._check(x)
        if self.is_zero:
            raise NoninvertibleCovariance("noninvertible covariance")
        return np.sum(x * x, axis=-1) / self.s2

    def trace(self):
        return self.s2 * self.dim

    def scaled(self, c):
        return Isotropic(self.s2 * c, self.dim)

    def describe(self):
        return f"iso({self.s2!r})"


@dataclass(frozen=True, eq=False)
class Diagonal(CovSpec):
    diag: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        diag = np.array(self.diag, dtype=float).reshape(-1)
        if not np.all(np.isfinite(diag)) or np.any(diag < 0):
            raise ValueError("diagonal variances must be finite and >= 0")
        diag.setflags(write=False)
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "dim", diag.size)

    @property
    def is_zero(self):
        return bool(np.all(self.diag == 0.0))

    def matrix(self):
        return np.diag(self.diag)

    def factor(self):
        return np.diag(np.sqrt(self.diag))

    def apply_factor(self, z):
        return np.sqrt(self.diag) * self._check(z)

    def weighted_sqnorm(self, x):
        x = self._check(x)
        if np.any(self.diag <= 0):
            raise NoninvertibleCovariance("noninvertible covariance")
        return np.sum(x * x / self.diag, axis=-1)

    def trace(self):
        return float(self.diag.sum())

    def scaled(self, c):
        return Diagonal(self.diag * c)

    def describe(self):
        return "diag(" + ",".join(repr(float(v)) for v in self.diag) + ")"


@dataclass(frozen=True, eq=False)
class Full(CovSpec):
    cov: np.ndarray
    dim: int = field(init=False)
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("full covariance must be a square matrix")
        if not np.all(np.isfinite(cov)):
            raise ValueError("full covariance must be finite")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(cov).max())):
            raise ValueError("full covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.all(cov == 0.0):
            fac = np.zeros_like(cov)
        else:
            fac = cholesky_with_jitter(cov)
        cov.setflags(write=False)
        fac.setflags(write=False)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "dim", cov.shape[0])
        object.__setattr__(self, "_factor", fac)

    @property
    def is_zero(self):
        return bool(np.all(self.cov == 0.0))

    def matrix(self):
        return np.array(self.cov)

    def factor(self):
        return np.array(self._factor)

    def apply_factor(self, z):
        return self._check(z) @ self._factor.T

    def weighted_sqnorm(self, x):
        x = self._check(x)
        diag = np.diag(self._factor)
        if self.is_zero or np.any(diag <= 0):
            raise NoninvertibleCovariance("noninvertible covariance")
        flat = x.reshape(-1, self.dim)
        sol = solve_triangular(self._factor, flat.T, lower=True)
        return np.sum(sol * sol, axis=0).reshape(x.shape[:-1])

    def scaled(self, c):
        return Full(self.cov * c)

    def describe(self):
        return "full(" + ";".join(",".join(repr(float(v)) for v in row) for row in self.cov) + ")"


def zero_cov(dim: int) -> Isotropic:
    return Isotropic(0.0, dim)


def _stream_hash(parent: int, tag) -> int:
    digest = hashlib.blake2b(f"{parent}/{tag!r}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RandomSource:
    """Splittable seed handle.

    ``(seed, stream)`` fully determines the draws of :meth:`generator`, and
    :meth:`child` derives a new 64-bit stream id from a tag, so every logical
    task (trial, purpose) owns its own stream regardless of scheduling.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def child(self, *tags) -> "RandomSource":
        stream = self.stream
        for tag in tags:
            stream = _stream_hash(stream, tag)
        return RandomSource(self.seed, stream)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))


RngLike = Union[RandomSource, np.random.Generator, int]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomSource):
        return rng.generator()
    return RandomSource(int(rng)).generator()


def sample_gaussian(cov: CovSpec, rng: RngLike, size=None, dim: int | None = None) -> np.ndarray:
    """Draw from N(0, cov); ``size`` prepends sample axes."""
    if dim is not None and dim != cov.dim:
        raise ValueError(f"dimension mismatch: covariance has d={cov.dim}, expected {dim}")
    gen = as_generator(rng)
    shape = (cov.dim,) if size is None else tuple(np.atleast_1d(size)) + (cov.dim,)
    z = gen.standard_normal(shape)
    return cov.apply_factor(z)


def weighted_sqnorm(x, cov: CovSpec):
    """x^T Sigma^{-1} x via the stored factor; raises on a noninvertible covariance."""
    out = cov.weighted_sqnorm(x)
    return float(out) if np.ndim(out) == 0 else out


def accumulate_cov(prefix: Sequence[CovSpec], dim: int | None = None) -> CovSpec:
    """Sum of covariances, promoting Isotropic -> Diagonal -> Full as needed.

    The empty sum is the exact zero covariance (``dim`` is required then).
    """
    prefix = list(prefix)
    if not prefix:
        if dim is None:
            raise ValueError("empty prefix needs an explicit dimension")
        return zero_cov(dim)
    d = prefix[0].dim if dim is None else dim
    for c in prefix:
        if c.dim != d:
            raise ValueError(f"dimension mismatch: {c.dim} != {d}")
    if all(isinstance(c, Isotropic) for c in prefix):
        return Isotropic(float(sum(c.s2 for c in prefix)), d)
    if not any(isinstance(c, Full) for c in prefix):
        total = np.zeros(d)
        for c in prefix:
            total = total + (c.diag if isinstance(c, Diagonal) else np.full(d, c.s2))
        return Diagonal(total)
    total = np.zeros((d, d))
    for c in prefix:
        total = total + c.matrix()
    return Full(total)
