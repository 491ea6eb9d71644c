import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latticeheat import potentials
from latticeheat.carleman import (
    SpaceTimeField,
    WeightConstructionError,
    admissibility,
    build_weight,
    carleman_sides,
    check_weight,
    sine_mode_field,
)
from latticeheat.geometry import ObservationMask, periodic_equidistributed
from latticeheat.lattice import LatticeBox
from latticeheat.schrodinger import cube_mask

L, T_STAR, LAM = 2.0, 1.0, 0.5


@pytest.fixture(scope="module")
def setup_1d():
    box = LatticeBox.centered(1, 0.1, 2.5)
    mask = periodic_equidistributed(box, L, 0.5)
    return box, mask, build_weight(mask, [0.0], L, T_STAR, lam=LAM)


@pytest.fixture(scope="module")
def setup_2d():
    box = LatticeBox.centered(2, 0.1, 2.5)
    mask = periodic_equidistributed(box, L, 0.5)
    return box, mask, build_weight(mask, [0.0, 0.0], L, T_STAR, lam=LAM)


@pytest.mark.parametrize("which", ["setup_1d", "setup_2d"])
def test_weight_conditions_hold(request, which):
    box, mask, w = request.getfixturevalue(which)
    rep = w.report
    assert rep.passes, rep.conditions()
    assert rep.grad_min >= rep.c and rep.psi_min > 0
    assert rep.dtT_max <= -rep.c and rep.dt0_off_omega_min >= rep.c
    assert rep.dn_max < 0 <= rep.dnn_min
    again = check_weight(w, mask, c=rep.c)
    assert again.conditions() == rep.conditions()


def test_weight_phi_positive_and_bounded(setup_2d):
    box, mask, w = setup_2d
    ts = np.linspace(0, T_STAR, 11)
    pts = box.points()[cube_mask(box, w.cube_centre, L).reshape(-1)]
    phi = w.phi(ts, pts)
    assert np.all(phi > 0)
    ratio = w.phi_ratio(ts, pts)
    assert ratio == pytest.approx(phi.max() / phi.min(), rel=1e-12)
    assert 1.0 < ratio < math.exp(LAM * 10)


def test_psi_derivatives_match_finite_differences(setup_2d):
    _, _, w = setup_2d
    t0, x0, eps = 0.37, np.array([[0.31, -0.42]]), 1e-6
    dt_fd = (w.psi([t0 + eps], x0) - w.psi([t0 - eps], x0)) / (2 * eps)
    assert w.psi_t([t0], x0)[0, 0] == pytest.approx(dt_fd[0, 0], rel=1e-6)
    g = w.psi_grad([t0], x0)[0, 0]
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        fd = (w.psi([t0], x0 + e) - w.psi([t0], x0 - e))[0, 0] / (2 * eps)
        assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-9)
    n = np.array([[0.6, 0.8]])
    e = 1e-4 * n[0]
    fd2 = (w.psi([t0], x0 + e) - 2 * w.psi([t0], x0) + w.psi([t0], x0 - e))[0, 0] / 1e-8
    assert w.psi_hess_dir([t0], x0, n)[0, 0] == pytest.approx(fd2, rel=1e-4)


def test_final_time_psi_is_constant(setup_2d):
    box, _, w = setup_2d
    vals = w.psi([T_STAR], box.points())[0]
    assert np.ptp(vals) <= 1e-12 * vals.max()


def test_empty_omega_raises():
    box = LatticeBox.centered(1, 0.1, 2.5)
    with pytest.raises(WeightConstructionError) as exc:
        build_weight(ObservationMask.empty(box), [0.0], L, T_STAR)
    assert exc.value.failing == "start_off_omega"


def test_zero_field_has_zero_sides(setup_1d):
    box, mask, w = setup_1d
    ts = np.linspace(0, T_STAR, 21)
    u = SpaceTimeField(box, ts, np.zeros((21,) + box.shape))
    cs = carleman_sides(u, w, 4.0, mask)
    assert cs.lhs == 0.0 and cs.rhs == 0.0
    assert math.isnan(cs.ratio)


def test_time_grid_must_span(setup_1d):
    box, mask, w = setup_1d
    ts = np.linspace(0, 0.5, 5)
    with pytest.raises(ValueError):
        carleman_sides(SpaceTimeField(box, ts, np.zeros((5,) + box.shape)), w, 4.0, mask)


def _single_mode(box, k, tc, n_time=81):
    return sine_mode_field(box, [0.0] * box.d, L, T_STAR, [(1.0, np.full(box.d, k))], tc, n_time=n_time)


def test_pde_term_matches_closed_form(setup_1d):
    box, mask, w = setup_1d
    k, s, tc = 2, 3.0, (0.4, -0.7, 1.1)
    u = _single_mode(box, k, tc)
    cs = carleman_sides(u, w, s, mask)
    # the lattice sine is an exact eigenvector: Delta_h S = -mu_k S
    h = box.h
    mu_k = 4.0 / h**2 * math.sin(k * math.pi * h / (2 * L)) ** 2
    x = box.points()[:, 0]
    S = np.where(np.abs(x) <= L / 2 + 1e-9, np.sin(k * math.pi * (x + L / 2) / L), 0.0)
    p, q, r = tc
    om = math.pi / T_STAR
    ts = u.ts
    a = ts * (p + q * ts / T_STAR + r * np.sin(om * ts))
    a2 = 2 * q / T_STAR + r * (2 * om * np.cos(om * ts) - om * om * ts * np.sin(om * ts))
    # three-point stencil on the zero-extended sine; Q is closed so its
    # boundary nodes carry the jump to the zero extension
    Sp = np.pad(S, 1)
    lapS = (Sp[2:] - 2 * Sp[1:-1] + Sp[:-2]) / h**2
    interior = np.abs(x) < L / 2 - 1e-9
    assert np.allclose(lapS[interior], -mu_k * S[interior], atol=1e-9)
    closed = np.abs(x) <= L / 2 + 1e-9
    res = np.where(closed, a2[:, None] * S[None, :] + a[:, None] * lapS[None, :], 0.0)
    wt = np.full(len(ts), ts[1] - ts[0])
    wt[[0, -1]] /= 2
    weight = np.exp(2 * s * w.phi(ts, box.points()))
    direct = float(np.sum(wt[:, None] * weight * res**2))
    assert cs.rhs_terms["pde"] == pytest.approx(math.log(direct), rel=1e-10)
    u_direct = float(np.sum(wt[:, None] * weight * (a[:, None] * S[None, :]) ** 2))
    assert cs.lhs_terms["s3_u"] == pytest.approx(math.log(s**3 * u_direct), rel=1e-10)


@given(st.integers(0, 1000))
def test_terms_are_finite_logs_and_admissibility_consistent(setup_1d, seed):
    box, mask, w = setup_1d
    rng = np.random.default_rng(seed)
    modes = [(float(rng.normal()), rng.integers(1, 4, size=1)) for _ in range(2)]
    u = sine_mode_field(box, [0.0], L, T_STAR, modes, tuple(rng.normal(size=3)), n_time=41)
    cs = carleman_sides(u, w, 4.0, mask, v1=potentials.sine())
    for v in list(cs.lhs_terms.values()) + list(cs.rhs_terms.values()):
        assert v < math.inf and not math.isnan(v)
    assert cs.log_lhs >= max(cs.lhs_terms.values()) - 1e-12
    assert cs.lhs > 0 and cs.rhs > 0
    assert not [f for f in cs.flags if not f.startswith("admissibility")]
    assert cs.admissible == (not cs.flags)


def test_s_scaling_of_cubic_term(setup_1d):
    # s^3 e^{2 s phi}: doubling s multiplies the term by 8 exp(2 s sum ...) >= 8
    box, mask, w = setup_1d
    u = _single_mode(box, 1, (1.0, 0.0, 0.0), n_time=41)
    a = carleman_sides(u, w, 2.0, mask).lhs_terms["s3_u"]
    b = carleman_sides(u, w, 4.0, mask).lhs_terms["s3_u"]
    phi = w.phi(u.ts, box.points())
    assert b - a >= math.log(8) + 2 * 2.0 * phi.min() - 1e-9
    assert b - a <= math.log(8) + 2 * 2.0 * phi.max() + 1e-9


def test_flags_for_initial_and_boundary_values(setup_1d):
    box, mask, w = setup_1d
    ts = np.linspace(0, T_STAR, 11)
    u = SpaceTimeField.from_function(box, ts, lambda t, x: np.ones(len(x)))
    cs = carleman_sides(u, w, 4.0, mask)
    assert "u(0) != 0 on Q" in cs.flags
    assert "u != 0 on the boundary of Q" in cs.flags


def test_finite_difference_time_derivatives_close_to_exact(setup_1d):
    box, _, _ = setup_1d
    u = _single_mode(box, 1, (0.3, 0.5, 0.2), n_time=201)
    bare = SpaceTimeField(box, u.ts, u.values)
    ut, utt = bare.time_derivatives()
    assert np.max(np.abs(ut - u.dt)) < 1e-3
    assert np.max(np.abs(utt[2:-2] - u.dtt[2:-2])) < 1e-2


def test_admissibility_constraints():
    a = admissibility(4.0, 0.1, 1.0, 1.0)
    assert a["s_min"] == pytest.approx(3.0)
    assert a["h_small"] and a["sh_small"] and a["s_large"]
    assert not admissibility(2.0, 0.1, 1.0, 1.0)["s_large"]
    assert not admissibility(20.0, 0.1, 0.0, 0.0)["sh_small"]
    assert not admissibility(1.0, 0.6, 0.0, 0.0)["h_small"]


def test_inadmissible_s_is_flagged(setup_1d):
    box, mask, w = setup_1d
    u = _single_mode(box, 1, (1.0, 0.0, 0.0), n_time=21)
    cs = carleman_sides(u, w, 0.5, mask)
    assert not cs.admissible and "admissibility: s_large" in cs.flags


def test_every_display_term_is_reported(setup_1d):
    box, mask, w = setup_1d
    cs = carleman_sides(_single_mode(box, 1, (1.0, 0.0, 0.0), n_time=21), w, 4.0, mask)
    assert set(cs.lhs_terms) == {"s3_u", "s_ut", "s_Dplus", "s_Dminus", "s_ut0", "s_utT", "s3_uT"}
    assert set(cs.rhs_terms) == {"pde", "s_DplusT", "s_DminusT", "s_ut0_omega"}
