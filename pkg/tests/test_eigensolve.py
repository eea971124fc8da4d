import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anderson_lab.eigensolve import (DIRECT_LIMIT, continuum_reference, fix_signs, gap_report, kyfan_sum,
                                     lanczos, lowest_k, rayleigh_sum, warn_if_degenerate)
from anderson_lab.errors import NoConvergence
from anderson_lab.hamiltonian import assemble, dense_oracle
from anderson_lab.lattice import ContinuumDomain, LatticeDomain, discretize
from anderson_lab.profiles import Profile


def path(n, eps=1.0):
    return LatticeDomain(eps, np.arange(n)[:, None])


def random_H(seed, d, eps, scale=1.0):
    lat = discretize(ContinuumDomain.unit_box(d), eps)
    return assemble(lat, scale * np.random.default_rng(seed).normal(size=lat.n))


def test_three_site_path_closed_form():
    H = assemble(path(3), np.zeros(3))
    spec = lowest_k(H, 3)
    np.testing.assert_allclose(spec.eigenvalues, [2 - math.sqrt(2), 2, 2 + math.sqrt(2)], rtol=1e-14)
    np.testing.assert_allclose(spec.eigenvalues, np.linalg.eigvalsh(dense_oracle(H)), rtol=1e-14)
    # closed form 2 - 2 cos(n pi / 4)
    np.testing.assert_allclose(spec.eigenvalues, [2 - 2 * math.cos(n * math.pi / 4) for n in (1, 2, 3)])


def test_single_site_exact():
    spec = lowest_k(assemble(path(1, 0.25), np.array([-3.0])), 1)
    assert spec.eigenvalues[0] == 2 * 16 - 3.0
    assert spec.next_eigenvalue is None


def test_lanczos_matches_direct_on_long_path():
    H = assemble(path(511, 1 / 512), np.zeros(511))
    a = lowest_k(H, 6, method="direct")
    b = lowest_k(H, 6, method="lanczos")
    np.testing.assert_allclose(b.eigenvalues, a.eigenvalues, rtol=1e-9)
    assert b.method == "lanczos" and a.method == "direct"


def test_auto_switches_at_direct_limit():
    small = random_H(0, 2, 1 / 40)  # 38^2 = 1444 sites
    big = random_H(0, 2, 1 / 50)  # 48^2 = 2304 sites
    assert small.dim <= DIRECT_LIMIT < big.dim
    assert lowest_k(small, 2).method == "direct"
    assert lowest_k(big, 2).method == "lanczos"


@given(st.integers(0, 10**6), st.sampled_from([(1, 0.01), (2, 0.06), (3, 0.12)]), st.integers(1, 5))
def test_lanczos_oracle_equivalence(seed, shape, k):
    d, eps = shape
    H = random_H(seed, d, eps, scale=10.0)
    exact = np.linalg.eigvalsh(dense_oracle(H))[:k]
    got = lowest_k(H, k, method="lanczos").eigenvalues
    np.testing.assert_allclose(got, exact, rtol=1e-8)


@pytest.mark.parametrize("method", ["direct", "lanczos"])
def test_spectrum_result_invariants(method):
    H = random_H(3, 2, 0.05)
    spec = lowest_k(H, 5, tol=1e-10, method=method)
    V = spec.eigenvectors
    np.testing.assert_allclose(np.linalg.norm(V, axis=0), 1, atol=1e-12)
    off = V.T @ V - np.eye(5)
    assert np.max(np.abs(off)) <= 1e-10
    assert np.all(spec.residuals <= 1e-10 * (np.abs(spec.eigenvalues) + H.norm_estimate))
    assert np.all(np.diff(spec.eigenvalues) >= 0)
    for j in range(5):
        col = V[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_sign_convention_agrees_across_solvers():
    H = random_H(4, 2, 0.06)
    a = lowest_k(H, 4, method="direct")
    b = lowest_k(H, 4, method="lanczos")
    np.testing.assert_allclose(a.eigenvectors, b.eigenvectors, atol=1e-7)


def test_fix_signs_tie_goes_to_lowest_index():
    v = np.array([[-1.0], [1.0]]) / math.sqrt(2)
    np.testing.assert_allclose(fix_signs(v)[:, 0], [1 / math.sqrt(2), -1 / math.sqrt(2)])


def test_adding_nonnegative_potential_raises_eigenvalues():
    lat = discretize(ContinuumDomain.unit_box(2), 0.05)
    rng = np.random.default_rng(9)
    xi = rng.normal(size=lat.n)
    a = lowest_k(assemble(lat, xi), 6).eigenvalues
    b = lowest_k(assemble(lat, xi + np.abs(rng.normal(size=lat.n))), 6).eigenvalues
    assert np.all(b >= a - 1e-10)


def test_lowest_k_argument_checks():
    H = assemble(path(3), np.zeros(3))
    with pytest.raises(ValueError):
        lowest_k(H, 0)
    with pytest.raises(ValueError):
        lowest_k(H, 4)
    with pytest.raises(ValueError):
        lowest_k(H, 1, tol=0)
    with pytest.raises(ValueError):
        lowest_k(H, 1, method="magic")


def test_no_convergence_reports_residuals():
    H = random_H(1, 2, 0.02)
    with pytest.raises(NoConvergence) as info:
        lanczos(H, 3, tol=1e-15, krylov_dim=12, max_restarts=1)
    assert info.value.residuals is not None and len(info.value.residuals) == 3


def test_record_is_json_ready():
    spec = lowest_k(assemble(path(3), np.zeros(3)), 2)
    rec = json.loads(json.dumps(spec.record(1.0)))
    assert rec["k"] == 2 and len(rec["eigenvalues"]) == 2 and len(rec["gaps"]) == 2
    assert set(rec) == {"eps", "k", "eigenvalues", "residuals", "gaps"}


# ---- Ky Fan sums ---------------------------------------------------------

def test_kyfan_examples():
    H = assemble(path(3), np.zeros(3))
    spec = lowest_k(H, 3)
    assert kyfan_sum(spec, 1) == spec.eigenvalues[0]
    assert kyfan_sum(spec, 3) == pytest.approx(6.0)
    for k in (2, 3):
        assert kyfan_sum(spec, k) - kyfan_sum(spec, k - 1) == pytest.approx(spec.eigenvalues[k - 1])
    with pytest.raises(ValueError):
        kyfan_sum(spec, 4)


def test_rayleigh_sum_examples():
    H = random_H(5, 1, 0.02)
    spec = lowest_k(H, 3)
    assert rayleigh_sum(H, spec.eigenvectors) == pytest.approx(kyfan_sum(spec, 3), abs=1e-9)
    e = np.zeros(H.dim)
    e[7] = 1
    assert rayleigh_sum(H, e) == pytest.approx(H.diagonal[7])
    assert rayleigh_sum(H, e) >= spec.eigenvalues[0]
    with pytest.raises(ValueError):
        rayleigh_sum(H, np.ones((H.dim, 2)))


@given(st.integers(0, 10**6), st.integers(1, 4))
def test_random_frames_never_beat_kyfan_sum(seed, k):
    H = random_H(seed % 5, 1, 0.02, scale=5.0)
    spec = lowest_k(H, k)
    Q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(H.dim, k)))
    assert rayleigh_sum(H, Q) >= kyfan_sum(spec, k) - 1e-9


# ---- gaps ------------------------------------------------------------------

def test_gap_report_examples():
    spec = lowest_k(assemble(path(3), np.zeros(3)), 2)
    delta, simple = gap_report(spec, 2)
    assert delta == pytest.approx(math.sqrt(2) / 3) and simple
    delta1, _ = gap_report(spec, 1)
    assert delta1 == pytest.approx(math.sqrt(2) / 3)  # upper gap only
    with pytest.raises(ValueError):
        gap_report(lowest_k(assemble(path(3), np.zeros(3)), 3), 3)


def test_degenerate_pair_detected():
    lat = LatticeDomain(1.0, np.array([[0], [5]]))  # two isolated sites
    spec = lowest_k(assemble(lat, np.zeros(2)), 1)
    delta, simple = gap_report(spec, 1)
    assert delta == 0 and not simple
    assert not spec.simple_flags[0]


# ---- continuum reference -----------------------------------------------

def test_unit_interval_reference():
    ref = continuum_reference(ContinuumDomain.unit_box(1), None, k=2)
    assert ref.eigenvalues[0] == pytest.approx(9.8696044, abs=1e-7)
    assert ref.eigenvalues[1] == pytest.approx(4 * math.pi**2)
    assert ref.method == "analytic"


def test_unit_square_reference_and_degeneracy_flags():
    ref = continuum_reference(ContinuumDomain.unit_box(2), 0.0, k=3, fine_eps=1 / 64)
    assert ref.eigenvalues[0] == pytest.approx(2 * math.pi**2)
    # lambda_2 = lambda_3 = 5 pi^2 on the square
    assert list(ref.simple_flags) == [True, False, False]
    with pytest.warns(UserWarning):
        assert warn_if_degenerate(ref, [1, 2]) == [2]


def test_constant_shift():
    a = continuum_reference(ContinuumDomain.unit_box(1), 0.0, k=3)
    b = continuum_reference(ContinuumDomain.unit_box(1), 5.0, k=3)
    np.testing.assert_allclose(b.eigenvalues - a.eigenvalues, 5.0)
    dom = ContinuumDomain.ball((0, 0), 1)
    c = continuum_reference(dom, 0.0, k=2, fine_eps=1 / 32, two_grid=False)
    e = continuum_reference(dom, 5.0, k=2, fine_eps=1 / 32, two_grid=False)
    np.testing.assert_allclose(e.eigenvalues - c.eigenvalues, 5.0, rtol=1e-9)


@pytest.mark.parametrize("dom,U", [(ContinuumDomain.unit_box(1), None),
                                   (ContinuumDomain.unit_box(1), Profile("10*x[0]")),
                                   (ContinuumDomain.ball((0, 0), 1), None)])
def test_reference_eigenfunctions_normalized(dom, U):
    ref = continuum_reference(dom, U, k=2, fine_eps=1 / 64)
    norms = ref.weight * np.sum(ref.values**2, axis=0)
    np.testing.assert_allclose(norms, 1, atol=1e-6)


def test_grid_reference_converges_and_reports_two_grid_error():
    dom = ContinuumDomain.unit_box(1)
    grid = continuum_reference(dom, None, k=2, fine_eps=1 / 256, analytic=False)
    assert grid.method == "grid"
    np.testing.assert_allclose(grid.eigenvalues, [math.pi**2, 4 * math.pi**2], rtol=5e-2)
    assert np.all(grid.error_estimate > 0)
    # the lattice problem with the boundary offset overshoots; halving reduces the error
    assert np.all(np.abs(grid.eigenvalues - [math.pi**2, 4 * math.pi**2]) > grid.error_estimate / 4)


def test_disk_first_eigenvalue():
    # first Dirichlet eigenvalue of the unit disk is j_{0,1}^2
    j01 = 2.404825557695773
    ref = continuum_reference(ContinuumDomain.ball((0, 0), 1), None, k=1, fine_eps=1 / 64)
    assert ref.eigenvalues[0] == pytest.approx(j01**2, rel=0.1)
    phi = ref.eigenfunction(1)
    assert phi(np.array([[0.0, 0.0]]))[0] > phi(np.array([[0.5, 0.0]]))[0] > 0


def test_analytic_eigenfunction_evaluator():
    ref = continuum_reference(ContinuumDomain.box([(0, 2)]), None, k=1)
    x = np.array([[0.5], [1.0], [3.0]])
    np.testing.assert_allclose(ref.eigenfunction(1)(x), [math.sin(math.pi / 4), 1.0, 0.0])
    assert ref.eigenvalues[0] == pytest.approx(math.pi**2 / 4)


@pytest.mark.parametrize("d,eps", [(1, 1 / 300), (2, 1 / 30), (3, 0.1)])
def test_shift_invert_matches_direct(d, eps):
    H = random_H(8, d, eps, scale=20.0)
    a = lowest_k(H, 4, method="direct")
    b = lowest_k(H, 4, method="shift-invert")
    np.testing.assert_allclose(b.eigenvalues, a.eigenvalues, rtol=1e-10)
    np.testing.assert_allclose(b.eigenvectors, a.eigenvectors, atol=1e-7)
