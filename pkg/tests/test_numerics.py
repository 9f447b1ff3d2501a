import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genbound.numerics import (
    Diagonal,
    Full,
    Isotropic,
    NoninvertibleCovariance,
    RandomSource,
    accumulate_cov,
    cholesky_with_jitter,
    sample_gaussian,
    weighted_sqnorm,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_zero_isotropic_samples_are_zero():
    z = sample_gaussian(Isotropic(0.0, 3), 1, size=50)
    assert z.shape == (50, 3)
    assert np.all(z == 0.0)


def test_diagonal_sample_variances():
    # CLT: SE of a sample variance is about var * sqrt(2/m); 5% is > 10 SE at m = 1e5
    x = sample_gaussian(Diagonal([1.0, 4.0]), RandomSource(3), size=100_000)
    np.testing.assert_allclose(x.var(axis=0), [1.0, 4.0], rtol=0.05)


def test_full_sample_covariance():
    F = np.array([[1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [-0.3, 0.2, 0.7]])
    sigma = F @ F.T
    x = sample_gaussian(Full(sigma), RandomSource(4), size=100_000)
    emp = np.cov(x.T)
    assert np.linalg.norm(emp - sigma) / np.linalg.norm(sigma) < 0.05


def test_sample_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        sample_gaussian(Isotropic(1.0, 2), 0, dim=3)


@given(st.lists(finite, min_size=1, max_size=6))
def test_identity_weight_is_euclidean(xs):
    x = np.array(xs)
    assert weighted_sqnorm(x, Isotropic(1.0, x.size)) == np.sum(x * x)


@given(st.lists(finite, min_size=1, max_size=6), st.floats(1e-3, 1e3))
def test_isotropic_weight(xs, s2):
    x = np.array(xs)
    assert weighted_sqnorm(x, Isotropic(s2, x.size)) == pytest.approx(np.sum(x * x) / s2, rel=1e-12, abs=1e-300)


def test_full_weight_matches_inverse():
    gen = np.random.default_rng(11)
    for _ in range(20):
        A = gen.standard_normal((4, 4))
        sigma = A @ A.T + 0.1 * np.eye(4)
        x = gen.standard_normal((7, 4))
        direct = np.einsum("ij,jk,ik->i", x, np.linalg.inv(sigma), x)
        np.testing.assert_allclose(weighted_sqnorm(x, Full(sigma)), direct, rtol=1e-10)


@given(st.lists(st.floats(1e-2, 1e2), min_size=1, max_size=5))
@settings(max_examples=50)
def test_diagonal_agrees_with_full(diag):
    x = np.linspace(-1, 2, len(diag))
    a = weighted_sqnorm(x, Diagonal(diag))
    b = weighted_sqnorm(x, Full(np.diag(diag)))
    assert a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("cov", [Isotropic(0.0, 2), Diagonal([1.0, 0.0]), Full(np.zeros((2, 2)))])
def test_noninvertible_weight_raises(cov):
    with pytest.raises(NoninvertibleCovariance, match="noninvertible covariance"):
        weighted_sqnorm(np.ones(2), cov)


def test_weight_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        weighted_sqnorm(np.ones(3), Diagonal([1.0, 1.0]))


def test_accumulate_isotropic():
    c = accumulate_cov([Isotropic(1.0, 2), Isotropic(3.0, 2)])
    assert isinstance(c, Isotropic) and c.s2 == 4.0


def test_accumulate_empty_is_zero():
    c = accumulate_cov([], dim=3)
    assert c.is_zero
    assert np.all(sample_gaussian(c, 0, size=4) == 0.0)
    with pytest.raises(ValueError):
        accumulate_cov([])


def test_accumulate_promotes():
    c = accumulate_cov([Diagonal([1.0, 2.0]), Isotropic(1.0, 2)])
    assert isinstance(c, Diagonal)
    np.testing.assert_array_equal(c.diag, [2.0, 3.0])
    full = accumulate_cov([c, Full(np.array([[1.0, 0.5], [0.5, 1.0]]))])
    assert isinstance(full, Full)
    np.testing.assert_allclose(full.matrix(), [[3.0, 0.5], [0.5, 4.0]])


def test_accumulate_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        accumulate_cov([Isotropic(1.0, 2), Isotropic(1.0, 3)])


def test_cholesky_jitter_on_singular_psd():
    v = np.array([1.0, 2.0])
    F = cholesky_with_jitter(np.outer(v, v))
    np.testing.assert_allclose(F @ F.T, np.outer(v, v), atol=1e-8)


def test_full_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        Full(np.array([[1.0, 0.2], [0.0, 1.0]]))


def test_random_source_streams():
    a = RandomSource(5).child("trial", 1).generator().random(3)
    b = RandomSource(5).child("trial", 1).generator().random(3)
    c = RandomSource(5).child("trial", 2).generator().random(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        RandomSource(-1)


def test_describe_and_scaled():
    assert Isotropic(2.0, 3).scaled(2.0).s2 == 4.0
    assert Diagonal([1.0, 2.0]).trace() == 3.0
    assert Full(np.eye(2)).scaled(3.0).trace() == 6.0
    assert Isotropic(0.5, 1).describe() == "iso(0.5)"
