import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latticeheat import potentials as P
from latticeheat.lattice import LatticeBox, LatticeDomainError, ScalarField
from latticeheat.schrodinger import (
    NegativeSpectrumWarning,
    SpectralThreshold,
    assemble_and_decompose,
    caccioppoli_check,
    decompose_cached,
    elliptic_lift,
    localization_check,
    localization_cutoff,
    mesh_cap,
)
from oracles import path_graph_eigenvalues


def test_three_node_spectrum():
    dec = assemble_and_decompose(LatticeBox.from_counts(1.0, 3), P.zero())
    np.testing.assert_allclose(dec.eigenvalues, [0.585786437626905, 2.0, 3.414213562373095], atol=1e-12)
    np.testing.assert_allclose(dec.eigenvalues, path_graph_eigenvalues(3, 1.0), atol=1e-12)


@pytest.mark.parametrize("n,h", [(10, 0.1), (57, 0.3), (200, 0.05)])
def test_path_graph_spectrum(n, h):
    dec = assemble_and_decompose(LatticeBox.from_counts(h, n), P.zero())
    np.testing.assert_allclose(dec.eigenvalues, path_graph_eigenvalues(n, h), rtol=1e-12, atol=1e-10)


def _brute_operator_2d(nx, ny, h):
    """Five-point stencil assembled by looping over nodes."""
    n = nx * ny
    a = np.zeros((n, n))
    for i in range(nx):
        for j in range(ny):
            k = i * ny + j
            a[k, k] = 4 / h**2
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < nx and 0 <= jj < ny:
                    a[k, ii * ny + jj] = -1 / h**2
    return a


@pytest.mark.parametrize("nx,ny", [(3, 3), (4, 6), (6, 6)])
def test_2d_spectrum_tensor_sums(nx, ny):
    h = 0.5
    dec = assemble_and_decompose(LatticeBox.from_counts(h, [nx, ny], d=2), P.zero())
    brute = np.linalg.eigvalsh(_brute_operator_2d(nx, ny, h))
    sums = np.sort(np.add.outer(path_graph_eigenvalues(nx, h), path_graph_eigenvalues(ny, h)).ravel())
    np.testing.assert_allclose(dec.eigenvalues, brute, atol=1e-10)
    np.testing.assert_allclose(dec.eigenvalues, sums, atol=1e-10)


def test_constant_shift():
    box = LatticeBox.centered(1, 0.25, 2.0)
    d0 = assemble_and_decompose(box, P.zero())
    d1 = assemble_and_decompose(box, P.constant(2.5))
    np.testing.assert_allclose(d1.eigenvalues, d0.eigenvalues + 2.5, atol=1e-12)
    np.testing.assert_allclose(np.abs(d1.vectors.T @ d0.vectors), np.eye(box.n_nodes), atol=1e-8)


def test_decomposition_invariants(dec_sine):
    lam = dec_sine.eigenvalues
    assert np.all(np.diff(lam) >= 0)
    assert np.all(dec_sine.residuals() <= 1e-10 * np.maximum(1.0, np.abs(lam)))
    np.testing.assert_allclose(dec_sine.vectors.T @ dec_sine.vectors, np.eye(dec_sine.n), atol=1e-10)


def test_nonnegative_potential_gives_nonnegative_spectrum():
    dec = assemble_and_decompose(LatticeBox.centered(2, 0.25, 1.0), P.power(2.0))
    assert dec.eigenvalues[0] >= 0


def test_partial_spectrum_path():
    box = LatticeBox.centered(1, 0.01, 25.0)  # 5001 unknowns, beyond the dense limit
    dec = assemble_and_decompose(box, P.zero(), n_eigs=5)
    assert not dec.complete
    np.testing.assert_allclose(dec.eigenvalues, path_graph_eigenvalues(box.n_nodes, 0.01)[:5], rtol=1e-9)
    with pytest.raises(Exception):
        dec.semigroup_apply(1.0, ScalarField.zeros(box))


# -- thresholds ---------------------------------------------------------------------

@pytest.mark.parametrize("h,eps0,J", [(0.1, 1.0, 3), (0.05, 1.0, 4), (0.2, 1.0, 2), (0.5, 1.0, 1),
                                      (1.0, 1.0, 0), (0.1, 4.0, 4), (0.25, 1.0, 2)])
def test_mesh_cap(h, eps0, J):
    assert mesh_cap(h, eps0) == J
    assert 4**J <= eps0 / h**2 * (1 + 1e-12) < 4 ** (J + 1)


@given(st.floats(0.001, 1.0), st.floats(0.5, 4.0))
def test_mesh_cap_property(h, eps0):
    x = eps0 / h**2
    if x < 1:
        with pytest.raises(LatticeDomainError):
            mesh_cap(h, eps0)
        return
    J = mesh_cap(h, eps0)
    assert 4**J <= x * (1 + 1e-12)
    assert 4 ** (J + 1) > x * (1 - 1e-12)


def test_threshold_range():
    assert SpectralThreshold(2, 0.1).mu == 16.0
    with pytest.raises(LatticeDomainError):
        SpectralThreshold(4, 0.1)


# -- projectors ---------------------------------------------------------------------------

def test_projector_extremes(dec_sine, rng):
    u = ScalarField(dec_sine.box, rng.standard_normal(dec_sine.box.shape))
    assert dec_sine.project(dec_sine.eigenvalues[0] - 1, u).norm() == 0
    np.testing.assert_allclose(dec_sine.project(dec_sine.eigenvalues[-1], u).values, u.values, atol=1e-12)


def test_tie_is_included(dec_zero):
    lam = dec_zero.eigenvalues
    assert dec_zero.dim(lam[5]) == 6
    assert dec_zero.next_eigenvalue(lam[5]) == lam[6]


@given(st.floats(0.0, 60.0), st.integers(0, 2**16))
def test_projector_idempotent_orthogonal(dec_sine, mu, seed):
    u = ScalarField(dec_sine.box, np.random.default_rng(seed).standard_normal(dec_sine.box.shape))
    pu = dec_sine.project(mu, u)
    assert (dec_sine.project(mu, pu) - pu).norm() < 1e-12 * max(1, u.norm())
    assert abs(np.dot(pu.flat, (u - pu).flat)) < 1e-12 * max(1, u.norm() ** 2)


@given(st.floats(0.0, 40.0), st.floats(0.0, 40.0))
def test_projector_family_nested(dec_sine, a, b):
    m1, m2 = min(a, b), max(a, b)
    p1 = dec_sine.spectral_projector(m1).matrix()
    p2 = dec_sine.spectral_projector(m2).matrix()
    np.testing.assert_allclose(p2 @ p1, p1, atol=1e-12)


# -- semigroup ------------------------------------------------------------------------------

def test_semigroup_zero_time(dec_sine, rng):
    u = ScalarField(dec_sine.box, rng.standard_normal(dec_sine.box.shape))
    np.testing.assert_array_equal(dec_sine.semigroup_apply(0.0, u).values, u.values)
    with pytest.raises(LatticeDomainError):
        dec_sine.semigroup_apply(-1.0, u)


def test_semigroup_single_mode(dec_sine):
    k = 4
    out = dec_sine.semigroup_apply(1.0, dec_sine.eigenvector(k))
    np.testing.assert_allclose(out.flat, math.exp(-dec_sine.eigenvalues[k]) * dec_sine.vectors[:, k], atol=1e-14)


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 2**16))
def test_semigroup_properties(dec_sine, s, t, seed):
    u = ScalarField(dec_sine.box, np.random.default_rng(seed).standard_normal(dec_sine.box.shape))
    a = dec_sine.semigroup_apply(s + t, u)
    b = dec_sine.semigroup_apply(s, dec_sine.semigroup_apply(t, u))
    assert (a - b).norm() <= 1e-10 * u.norm()
    assert dec_sine.semigroup_apply(t, u).norm() <= u.norm() * (1 + 1e-12)
    mu = 10.0
    c = dec_sine.project(mu, dec_sine.semigroup_apply(t, u)) - dec_sine.semigroup_apply(t, dec_sine.project(mu, u))
    assert c.norm() <= 1e-10 * u.norm()


@given(st.floats(0.0, 50.0), st.floats(0.01, 1.0), st.integers(0, 2**16))
def test_high_frequency_dissipation(dec_sine, mu, t, seed):
    u = ScalarField(dec_sine.box, np.random.default_rng(seed).standard_normal(dec_sine.box.shape))
    high = u - dec_sine.project(mu, u)
    lam_plus = dec_sine.next_eigenvalue(mu)
    # the projection leaves rounding residue of order 1e-16 |u| in slowly decaying modes
    bound = math.exp(-lam_plus * t) * high.norm() * (1 + 1e-10) + 1e-14 * u.norm()
    assert dec_sine.semigroup_apply(t, high).norm() <= bound


# -- localization -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dec_square():
    return assemble_and_decompose(LatticeBox.centered(1, 0.1, 8.0), P.power(2.0))


def test_localization_empty_subspace(dec_square):
    rep = localization_check(dec_square, dec_square.eigenvalues[0] / 2, 2.0, 1.0)
    assert rep.passes and rep.ratios.size == 0


def test_localization_ground_state(dec_square):
    mu = dec_square.eigenvalues[0]
    rep = localization_check(dec_square, mu, 2.0, 1.0)
    assert rep.cutoff == pytest.approx(math.sqrt(2 * mu))
    assert rep.passes
    # the ground state ratio computed directly
    phi = dec_square.vectors[:, 0]
    x = dec_square.box.axis_coords(0)
    direct = 1.0 / np.sum(phi[np.abs(x) <= rep.cutoff + 1e-12] ** 2)
    assert rep.ratios[0] == pytest.approx(direct, rel=1e-12)
    assert 1.0 < direct <= 2.0


def test_localization_full_box_ratio_one(dec_square):
    rep = localization_check(dec_square, 4 * dec_square.eigenvalues[0], 2.0, 1.0, cutoff=8.0)
    np.testing.assert_allclose(rep.ratios, 1.0, rtol=1e-12)


def test_localization_box_too_small(dec_square):
    with pytest.raises(LatticeDomainError):
        localization_check(dec_square, 1.0, 2.0, 1.0, cutoff=9.0)


def test_localization_cutoff_formula():
    assert localization_cutoff(8.0, 3.0, 2.0) == pytest.approx(8 ** (1 / 3))


# -- Caccioppoli ------------------------------------------------------------------------------------

def test_caccioppoli_zero_data():
    box = LatticeBox.centered(1, 0.25, 2.5)
    rep = caccioppoli_check(box, P.constant(1.0), 2.0, [0.0], lambda x: np.zeros(len(x)))
    assert rep.lhs == 0 and rep.rhs == 0 and rep.passes


def test_caccioppoli_affine_closed_form():
    h, L, a, b = 0.25, 2.0, 0.7, -1.3
    box = LatticeBox.centered(1, h, L + 2 * h)
    rep = caccioppoli_check(box, P.zero(), L, [0.0], lambda x: a + b * x[:, 0])
    x = np.arange(-8, 9) * h
    np.testing.assert_allclose(rep.solution.on(box).values[2:-2], a + b * x, atol=1e-12)
    assert rep.lhs == pytest.approx(9 * b * b, rel=1e-12)
    assert rep.rhs == pytest.approx(2 * 72 / L**2 * np.sum((a + b * x) ** 2), rel=1e-12)
    assert rep.passes


@pytest.mark.parametrize("d", [1, 2])
def test_caccioppoli_random_data(d, rng):
    box = LatticeBox.centered(d, 0.25, 2.5)
    for _ in range(5):
        rep = caccioppoli_check(box, P.constant(1.0), 2.0, np.zeros(d), lambda x: rng.standard_normal(len(x)))
        assert rep.passes and rep.lhs > 0


def test_caccioppoli_cube_must_fit():
    with pytest.raises(LatticeDomainError):
        caccioppoli_check(LatticeBox.centered(1, 0.25, 1.0), P.zero(), 2.0, [0.0], lambda x: np.ones(len(x)))


# -- elliptic lift --------------------------------------------------------------------------------------

def test_lift_at_zero(dec_zero, rng):
    v = ScalarField(dec_zero.box, rng.standard_normal(dec_zero.box.shape))
    assert elliptic_lift(dec_zero, 10.0, v, 0.0).norm() == 0


def test_lift_single_mode(dec_zero):
    k = 3
    lam = dec_zero.eigenvalues[k]
    out = elliptic_lift(dec_zero, 10.0, dec_zero.eigenvector(k), 3.0)
    expect = math.sinh(3 * math.sqrt(lam)) / math.sqrt(lam)
    np.testing.assert_allclose(out.flat, expect * dec_zero.vectors[:, k], rtol=1e-12, atol=1e-12)


def test_lift_time_derivative(dec_zero, rng):
    mu = 10.0
    v = dec_zero.project(mu, ScalarField(dec_zero.box, rng.standard_normal(dec_zero.box.shape)))
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        fd = (elliptic_lift(dec_zero, mu, v, dt) - elliptic_lift(dec_zero, mu, v, 0.0)) / dt
        # sinh(r t)/r = t + r^2 t^3 / 6: the one-sided quotient carries an O(dt^2) error
        errs.append((fd - v).norm())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[-1] < 1e-3 * v.norm()


def test_lift_negative_spectrum_warns():
    box = LatticeBox.centered(1, 0.25, 2.0)
    dec = assemble_and_decompose(box, P.constant(-5.0))
    v = dec.eigenvector(0)
    with pytest.warns(NegativeSpectrumWarning):
        out = elliptic_lift(dec, 0.0, v, 0.5)
    r = math.sqrt(-dec.eigenvalues[0])
    np.testing.assert_allclose(out.flat, math.sin(r * 0.5) / r * v.flat, atol=1e-12)


# -- persistence ------------------------------------------------------------------------------------------

def test_cache_roundtrip(tmp_path):
    box = LatticeBox.centered(1, 0.25, 2.0)
    a = decompose_cached(box, P.sine(), tmp_path)
    assert len(list(tmp_path.glob("dec_*.npz"))) == 1
    b = decompose_cached(box, P.sine(), tmp_path)
    np.testing.assert_array_equal(a.eigenvalues, b.eigenvalues)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    a.eigenvalues_to_csv(tmp_path / "ev.csv")
    assert len((tmp_path / "ev.csv").read_text().splitlines()) == box.n_nodes + 1
