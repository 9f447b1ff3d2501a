import math

import numpy as np
import pytest
from scipy import integrate, stats

from genbound.kl_lab import (
    DiscreteLaw,
    GridSpec,
    GridTooCoarse,
    coupling_bound,
    lemma_check,
    optimal_coupling_cost,
    permutation_coupling_cost,
    quadrature_kl,
    smoothed_density,
    write_lemma_csv,
)
from genbound.numerics import Diagonal, Full, Isotropic, RandomSource


def test_point_mass_density_peak():
    assert smoothed_density(DiscreteLaw.point(0.0), Isotropic(1.0, 1), np.array([0.0])) == pytest.approx(
        1 / math.sqrt(2 * math.pi), rel=1e-12)


def test_merged_atoms_behave_like_one_gaussian():
    law = DiscreteLaw([[-1e-3], [1e-3]], [0.5, 0.5])
    x = np.linspace(-3, 3, 13)[:, None]
    np.testing.assert_allclose(smoothed_density(law, Isotropic(1.0, 1), x), stats.norm.pdf(x[:, 0]), rtol=0.01)


def test_density_normalized():
    law = DiscreteLaw([[0.0], [2.0], [-1.0]], [0.2, 0.5, 0.3])
    val, _ = integrate.quad(lambda t: smoothed_density(law, Isotropic(0.25, 1), np.array([t])), -20, 20, limit=200)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_identical_laws_zero_kl():
    law = DiscreteLaw([[0.0, 1.0], [1.0, -1.0]], [0.3, 0.7])
    assert abs(quadrature_kl(law, law, Diagonal([0.5, 2.0]))) < 1e-12


@pytest.mark.parametrize("x,y,s2", [(0.0, 1.0, 1.0), (-1.5, 1.5, 0.25), (0.3, 2.0, 4.0)])
def test_point_masses_1d(x, y, s2):
    kl = quadrature_kl(DiscreteLaw.point(x), DiscreteLaw.point(y), Isotropic(s2, 1))
    assert kl == pytest.approx((x - y) ** 2 / (2 * s2), rel=1e-6)


def test_point_masses_2d_diagonal_and_full():
    p, q = DiscreteLaw.point([0.5, -1.0]), DiscreteLaw.point([-0.5, 0.5])
    D = np.array([0.5, 2.0])
    diff = np.array([1.0, -1.5])
    assert quadrature_kl(p, q, Diagonal(D)) == pytest.approx(0.5 * np.sum(diff**2 / D), rel=1e-6)
    S = np.array([[1.0, 0.4], [0.4, 0.8]])
    assert quadrature_kl(p, q, Full(S)) == pytest.approx(0.5 * diff @ np.linalg.solve(S, diff), rel=1e-6)


def test_mixture_kl_matches_adaptive_quadrature():
    p = DiscreteLaw([[0.0], [1.5]], [0.6, 0.4])
    q = DiscreteLaw([[-0.5], [0.3], [2.0]], [0.2, 0.5, 0.3])
    cov = Isotropic(0.49, 1)

    def f(t):
        a = smoothed_density(p, cov, np.array([t]))
        b = smoothed_density(q, cov, np.array([t]))
        return a * math.log(a / b)

    oracle, _ = integrate.quad(f, -12, 14, limit=400, epsabs=1e-12)
    assert quadrature_kl(p, q, cov) == pytest.approx(oracle, abs=1e-7)


def test_grid_too_coarse_suggests_more_points():
    p, q = DiscreteLaw.point(0.0), DiscreteLaw.point(3.0)
    with pytest.raises(GridTooCoarse) as err:
        quadrature_kl(p, q, Isotropic(1e-4, 1), grid=GridSpec([-1.0], [4.0], 256))
    assert err.value.suggested == 512


def test_independent_vs_optimal_coupling():
    # X = Y uniform on {-1, +1}: the identity coupling costs 0, the independent one 1.0 (sigma = 1)
    law = DiscreteLaw([[-1.0], [1.0]], [0.5, 0.5])
    cov = Isotropic(1.0, 1)
    assert coupling_bound(law, law, cov, "independent") == pytest.approx(1.0)
    assert coupling_bound(law, law, cov, "brute-force-optimal") == pytest.approx(0.0, abs=1e-12)
    assert abs(quadrature_kl(law, law, cov)) < 1e-12
    with pytest.raises(ValueError):
        coupling_bound(law, law, cov, "greedy")


def test_lp_matches_permutation_brute_force():
    gen = np.random.default_rng(3)
    for k in (2, 3, 4, 5):
        C = gen.uniform(0, 5, size=(k, k))
        w = np.full(k, 1 / k)
        assert optimal_coupling_cost(C, w, w) == pytest.approx(permutation_coupling_cost(C), abs=1e-9)


def test_lp_splits_mass():
    # unequal weights need a split plan; compute the optimum of the 2x2 problem by hand
    C = np.array([[0.0, 1.0], [4.0, 0.0]])
    a, b = np.array([0.7, 0.3]), np.array([0.4, 0.6])
    # pi_11 = 0.4, pi_12 = 0.3, pi_22 = 0.3 -> cost 0.3
    assert optimal_coupling_cost(C, a, b) == pytest.approx(0.3, abs=1e-9)


@pytest.mark.parametrize("d,full", [(1, False), (2, False), (2, True)])
def test_lemma_check_no_violations(d, full):
    rep = lemma_check(8, d=d, rng=RandomSource(d + 10 * full), full_cov=full)
    assert rep.ok and len(rep.instances) == 8
    assert all(i.independent_bound >= i.optimal_bound - 1e-9 for i in rep.instances)
    assert rep.min_slack >= -1e-6


def test_point_mass_slack_is_zero():
    rep = lemma_check(5, d=1, rng=RandomSource(1), point_masses=True)
    assert rep.ok and max(abs(i.slack) for i in rep.instances) < 1e-5


def test_injected_violation(tmp_path):
    rep = lemma_check(2, d=1, rng=0, inject_violation=True)
    assert rep.violations == [0] and not rep.ok
    write_lemma_csv(rep, tmp_path / "lemma.csv")
    lines = (tmp_path / "lemma.csv").read_text().splitlines()
    assert lines[0] == "instance_id,kl,independent_bound,optimal_bound,slack" and len(lines) == 3


def test_law_validation():
    with pytest.raises(ValueError):
        DiscreteLaw([[0.0]], [0.5])
    with pytest.raises(ValueError):
        DiscreteLaw(np.zeros((9, 1)), np.full(9, 1 / 9))
    with pytest.raises(ValueError):
        DiscreteLaw(np.zeros((1, 3)), [1.0])
    with pytest.raises(ValueError):
        quadrature_kl(DiscreteLaw.point(0.0), DiscreteLaw.point([0.0, 1.0]), Isotropic(1.0, 1))
