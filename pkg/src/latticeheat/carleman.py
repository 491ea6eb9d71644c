"""A concrete Carleman weight and the two sides of the space-time Carleman inequality.

The weight family is our own.  With c the centre of the largest piece of
omega inside the cube Q = Q_L(x_Q) (side L) and rho = |x - c|,

    psi(t, x) = K + B (T* - t)^2 G(rho) + A (a0 t - beta t^2 / 2),
    G(rho)    = (1 + rho^2 / sigma^2)^(-m).

G has a smooth maximum at c and decays only polynomially, so the space-time
gradient of psi stays bounded below on Q_{2L}.  The time profile makes
d_t psi negative near c and at t = T* while d_t psi(0, .) is positive away
from c, which is where omega is not.  At t = T* the G term vanishes so psi is
constant there.  G is convex in the normal direction on the boundary of the
neighbourhood cube once rho >= sigma sqrt(d / (2m + 2 - d)).

All the Carleman terms carry factors exp(2 s phi) with phi = exp(lambda psi);
they are accumulated in log form so that large s does not overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .geometry import ObservationMask
from .lattice import LatticeBox, ScalarField, backward_diff, forward_diff, laplacian
from .potentials import PotentialSpec, restrict, sup_norms
from .schrodinger import cube_mask


class WeightConstructionError(RuntimeError):
    def __init__(self, message, failing=None):
        super().__init__(message)
        self.failing = failing


@dataclass
class WeightReport:
    grad_min: float          # min |grad_{t,x} psi| on (0, T*) x Q_{2L}
    psi_min: float           # min psi on (0, T*) x Q_{2L}
    dt0_off_omega_min: float  # min d_t psi(0, x) over Q_L \ omega
    dtT_max: float           # max d_t psi(T*, x) over Q_L
    psiT_spread: float       # max - min of psi(T*, .) over Q_L
    dn_max: float            # max normal derivative on (0, T*) x boundary
    dnn_min: float           # min second normal derivative on (0, T*) x boundary
    c: float

    def conditions(self) -> dict:
        c = self.c
        return {
            "gradient": self.grad_min >= c,
            "positive": self.psi_min > 0,
            "start_off_omega": self.dt0_off_omega_min >= c,
            "final_constant": self.psiT_spread <= 1e-12 * max(1.0, abs(self.psi_min)),
            "final_decreasing": self.dtT_max <= -c,
            "boundary_normal": self.dn_max < 0,
            "boundary_convex": self.dnn_min >= 0,
        }

    @property
    def passes(self) -> bool:
        return all(self.conditions().values())


@dataclass
class CarlemanWeight:
    T_star: float
    lam: float
    centre: np.ndarray
    sigma: float
    m: float
    A: float
    B: float
    K: float
    a0: float
    beta: float
    cube_centre: np.ndarray
    L: float
    margin: float
    report: Optional[WeightReport] = None
    meta: dict = field(default_factory=dict)

    # psi and its derivatives, vectorised over t (shape (nt,)) and points (shape (n, d))
    def _G(self, rho2):
        return (1.0 + rho2 / self.sigma**2) ** (-self.m)

    def _Gp_over_rho(self, rho2):
        # G'(rho) / rho
        return -2.0 * self.m / self.sigma**2 * (1.0 + rho2 / self.sigma**2) ** (-self.m - 1)

    def psi(self, t, x):
        t = np.asarray(t, dtype=float)[:, None]
        rho2 = np.sum((np.atleast_2d(x) - self.centre) ** 2, axis=1)[None, :]
        return self.K + self.B * (self.T_star - t) ** 2 * self._G(rho2) + self.A * (self.a0 * t - 0.5 * self.beta * t**2)

    def psi_t(self, t, x):
        t = np.asarray(t, dtype=float)[:, None]
        rho2 = np.sum((np.atleast_2d(x) - self.centre) ** 2, axis=1)[None, :]
        return -2.0 * self.B * (self.T_star - t) * self._G(rho2) + self.A * (self.a0 - self.beta * t)

    def psi_grad(self, t, x):
        """Spatial gradient, shape (nt, n, d)."""
        t = np.asarray(t, dtype=float)[:, None, None]
        diff = np.atleast_2d(x) - self.centre
        rho2 = np.sum(diff**2, axis=1)
        return self.B * (self.T_star - t) ** 2 * (self._Gp_over_rho(rho2)[:, None] * diff)[None]

    def psi_hess_dir(self, t, x, n):
        """Second derivative of psi along the unit vectors n (shape (n_pts, d))."""
        t = np.asarray(t, dtype=float)[:, None]
        diff = np.atleast_2d(x) - self.centre
        rho2 = np.sum(diff**2, axis=1)
        q = 1.0 + rho2 / self.sigma**2
        # Hessian of G(rho) = g1 I + g2 diff diff^T
        g1 = -2.0 * self.m / self.sigma**2 * q ** (-self.m - 1)
        g2 = 4.0 * self.m * (self.m + 1) / self.sigma**4 * q ** (-self.m - 2)
        proj = np.sum(diff * n, axis=1)
        return self.B * (self.T_star - t) ** 2 * (g1 + g2 * proj**2)[None, :]

    def phi(self, t, x):
        return np.exp(self.lam * self.psi(t, x))

    def phi_ratio(self, t, x) -> float:
        p = self.psi(t, x)
        return math.exp(self.lam * (p.max() - p.min()))


def _omega_centre(mask: ObservationMask, inside: np.ndarray) -> tuple[np.ndarray, float]:
    """Centre of the largest piece of omega inside Q and its distance to Q minus omega.

    Lattice nodes stand for the half-open cells x + [0, h)^d, so the centre of
    a connected piece is the centroid of its nodes shifted by h/2 per axis.
    This keeps the point fixed under mesh refinement of the same continuum set.
    """
    box = mask.box
    om = (mask.flat & inside).reshape(box.shape)
    if not np.any(om):
        raise WeightConstructionError("omega does not meet Q_L", failing="start_off_omega")
    labels, n = ndimage.label(om)
    sizes = ndimage.sum(om, labels, index=np.arange(1, n + 1))
    piece = labels.reshape(-1) == (int(np.argmax(sizes)) + 1)
    pts = box.points()
    centre = pts[piece].mean(axis=0) + box.h / 2
    others = pts[~mask.flat & inside]
    if len(others) == 0:
        return centre, math.inf
    return centre, float(np.min(np.linalg.norm(others - centre, axis=1)))


def _boundary_samples(centre: np.ndarray, half: float, n_side: int):
    """Points and outward normals on the faces of the cube centre + [-half, half]^d."""
    d = len(centre)
    grid = np.linspace(-half, half, n_side)
    pts, normals = [], []
    for j in range(d):
        for sgn in (-1.0, 1.0):
            mesh = np.meshgrid(*([grid] * (d - 1)), indexing="ij") if d > 1 else []
            face = np.zeros((n_side ** (d - 1), d))
            others = [k for k in range(d) if k != j]
            for slot, k in enumerate(others):
                face[:, k] = mesh[slot].reshape(-1)
            face[:, j] = sgn * half
            nrm = np.zeros_like(face)
            nrm[:, j] = sgn
            pts.append(face + centre)
            normals.append(nrm)
    return np.concatenate(pts), np.concatenate(normals)


def build_weight(mask: ObservationMask, cube_centre, L: float, T_star: float, lam: float = 1.0,
                 c: float = 0.01, m: float = 1.0, margin: Optional[float] = None,
                 n_time: int = 41, sigma_factors=(2.0, 3.0, 4.0)) -> CarlemanWeight:
    """Construct psi for the cube Q_L(cube_centre) and check its conditions on a grid.

    sigma is r / f for the first f in ``sigma_factors`` that passes, where r
    is the distance from the chosen centre to the nearest node of Q_L outside
    omega.  The neighbourhood is the cube of half-width L/2 + margin
    (margin defaults to L/4).
    """
    box = mask.box
    cube_centre = np.atleast_1d(np.asarray(cube_centre, dtype=float))
    inside = cube_mask(box, cube_centre, L / 2).reshape(-1)
    centre, r = _omega_centre(mask, inside)
    if not math.isfinite(r):
        r = L / 2
    margin = L / 4 if margin is None else margin
    last = None
    for f in sigma_factors:
        sigma = r / f
        g_off = (1.0 + r**2 / sigma**2) ** (-m)
        A, B = 1.0, 1.0
        theta = 0.5 * (1.0 + g_off)
        a0 = 2.0 * B * T_star * theta / A
        beta = (a0 + 1.0) / T_star
        K = 1.0 + max(0.0, (1.0 - a0) * T_star / 2)
        w = CarlemanWeight(T_star, lam, centre, sigma, m, A, B, K, a0, beta, cube_centre, L, margin,
                           meta={"r": r, "g_off": g_off, "sigma_factor": f})
        w.report = check_weight(w, mask, c=c, n_time=n_time)
        if w.report.passes:
            return w
        last = w
    failing = [k for k, ok in last.report.conditions().items() if not ok]
    raise WeightConstructionError(f"no weight in the family passes; failing conditions: {failing}", failing=failing)


def check_weight(w: CarlemanWeight, mask: ObservationMask, c: float = 0.01, n_time: int = 41) -> WeightReport:
    box = mask.box
    d = box.d
    ts = np.linspace(0.0, w.T_star, n_time)
    t_open = ts[1:-1]
    # Q_{2L}: side 2L, sampled on the lattice plus a finer continuum grid
    big = cube_mask(box, w.cube_centre, w.L).reshape(-1)
    pts2 = box.points()[big]
    fine = np.stack(np.meshgrid(*([np.linspace(-w.L, w.L, 41)] * d), indexing="ij"), -1).reshape(-1, d) + w.cube_centre
    pts2 = np.concatenate([pts2, fine])
    gx = w.psi_grad(t_open, pts2)
    gt = w.psi_t(t_open, pts2)
    grad = np.sqrt(gt**2 + np.sum(gx**2, axis=2))
    psi_vals = w.psi(t_open, pts2)

    qL = cube_mask(box, w.cube_centre, w.L / 2).reshape(-1)
    off = box.points()[qL & ~mask.flat]
    dt0 = w.psi_t(np.array([0.0]), off)[0] if len(off) else np.array([math.inf])
    on_q = box.points()[qL]
    dtT = w.psi_t(np.array([w.T_star]), on_q)[0]
    psiT = w.psi(np.array([w.T_star]), on_q)[0]

    bpts, normals = _boundary_samples(w.cube_centre, w.L / 2 + w.margin, 33)
    dn = np.einsum("tnd,nd->tn", w.psi_grad(t_open, bpts), normals)
    dnn = w.psi_hess_dir(t_open, bpts, normals)
    return WeightReport(float(grad.min()), float(psi_vals.min()), float(dt0.min()), float(dtT.max()),
                        float(psiT.max() - psiT.min()), float(dn.max()), float(dnn.min()), c)


# -- the functional -------------------------------------------------------------

@dataclass
class SpaceTimeField:
    """Real values on the nodes of ``box`` at the times ``ts`` (array of shape (nt, *box.shape))."""

    box: LatticeBox
    ts: np.ndarray
    values: np.ndarray
    dt: Optional[np.ndarray] = None
    dtt: Optional[np.ndarray] = None

    @classmethod
    def from_function(cls, box: LatticeBox, ts, func: Callable, dt: Optional[Callable] = None,
                      dtt: Optional[Callable] = None) -> "SpaceTimeField":
        """Sample ``func(t, points)`` (and optional closed-form time derivatives)."""
        ts = np.asarray(ts, dtype=float)
        pts = box.points()

        def sample(f):
            return np.stack([np.asarray(f(t, pts), dtype=float).reshape(box.shape) for t in ts])

        return cls(box, ts, sample(func), sample(dt) if dt else None, sample(dtt) if dtt else None)

    def time_derivatives(self):
        """(u_t, u_tt), from the supplied arrays or by second-order finite differences."""
        ut = self.dt if self.dt is not None else np.gradient(self.values, self.ts, axis=0, edge_order=2)
        utt = self.dtt if self.dtt is not None else np.gradient(ut, self.ts, axis=0, edge_order=2)
        return ut, utt


@dataclass
class CarlemanSides:
    log_lhs: float
    log_rhs: float
    lhs_terms: dict
    rhs_terms: dict
    admissible: bool
    flags: list

    @property
    def lhs(self) -> float:
        return _exp(self.log_lhs)

    @property
    def rhs(self) -> float:
        return _exp(self.log_rhs)

    @property
    def log_ratio(self) -> float:
        if self.log_lhs == -math.inf:
            return -math.inf if self.log_rhs > -math.inf else math.nan
        return self.log_lhs - self.log_rhs

    @property
    def ratio(self) -> float:
        return _exp(self.log_ratio) if not math.isnan(self.log_ratio) else math.nan


def _exp(x):
    return math.exp(x) if x < 709 else math.inf


def _log_weighted_sq(logw: np.ndarray, f: np.ndarray) -> float:
    """log sum exp(logw) |f|^2 with zero entries skipped."""
    f2 = np.abs(f) ** 2
    nz = f2 > 0
    if not np.any(nz):
        return -math.inf
    return float(logsumexp(logw[nz] + np.log(f2[nz])))


def _trapezoid_logweights(ts: np.ndarray) -> np.ndarray:
    w = np.zeros_like(ts)
    dt = np.diff(ts)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return np.log(w)


def admissibility(s: float, h: float, v1_w1: float, v2_inf: float, s0: float = 1.0,
                  eps0: float = 1.0, h0: float = 0.5) -> dict:
    """The three constraints on (s, h): h <= h0, s h <= eps0 and s >= s0 (||V1||^{1/2} + ||V2||^{2/3} + 1)."""
    need = s0 * (math.sqrt(v1_w1) + v2_inf ** (2.0 / 3.0) + 1.0)
    return {"h_small": h <= h0, "sh_small": s * h <= eps0, "s_large": s >= need, "s_min": need}


def carleman_sides(u: SpaceTimeField, weight: CarlemanWeight, s: float, mask: ObservationMask,
                   v1: Optional[PotentialSpec] = None, v2: Optional[PotentialSpec] = None,
                   s0: float = 1.0, eps0: float = 1.0, h0: float = 0.5, zero_tol: float = 1e-12) -> CarlemanSides:
    """Both sides of the Carleman inequality for u on [0, T*] x Q, term by term.

    LHS terms: s^3 |e^{s phi} u|^2, s |e^{s phi} u_t|^2, s |e^{s phi} D+ u|^2,
    s |e^{s phi} D- u|^2 (space-time), s |e^{s phi(0)} u_t(0)|^2 on Q,
    s e^{2 s phi(T*)} |u_t(T*)|^2 and s^3 e^{2 s phi(T*)} |u(T*)|^2.
    RHS terms: |e^{s phi} (d_t^2 - P_h) u|^2 (space-time),
    s e^{2 s phi(T*)} |D+- u(T*)|^2 and s |e^{s phi(0)} u_t(0)|^2 on omega.

    Time integrals use the trapezoid rule on ``u.ts``; lattice sums carry no
    h^d weight.  Values are logs; ``flags`` lists violated preconditions.
    """
    box = u.box
    q = cube_mask(box, weight.cube_centre, weight.L / 2)
    if not np.allclose(u.ts[[0, -1]], [0.0, weight.T_star]):
        raise ValueError("time grid must span [0, T*]")
    pts = box.points()
    flags = []
    vals = np.where(q, u.values, 0.0)
    if np.max(np.abs(vals[0])) > zero_tol * max(1.0, np.max(np.abs(vals))):
        flags.append("u(0) != 0 on Q")
    shell = q & ~cube_mask(box, weight.cube_centre, weight.L / 2, open_=True)
    if np.max(np.abs(vals[:, shell])) > zero_tol * max(1.0, np.max(np.abs(vals))):
        flags.append("u != 0 on the boundary of Q")

    ut, utt = u.time_derivatives()
    ut = np.where(q, ut, 0.0)
    utt = np.where(q, utt, 0.0)

    zero = restrict(lambda x: np.zeros(len(x)), box)
    pv1 = restrict(v1, box) if v1 is not None else zero
    pv2 = restrict(v2, box) if v2 is not None else zero
    vq = np.where(q, pv1.values + pv2.values, 0.0)
    n1 = sup_norms(v1, _q_box(box, weight)) if v1 is not None else {"Linf": 0.0, "W1inf": 0.0}
    n2 = sup_norms(v2, _q_box(box, weight), w1=False) if v2 is not None else {"Linf": 0.0}
    adm = admissibility(s, box.h, n1["W1inf"], n2["Linf"], s0, eps0, h0)
    for key in ("h_small", "sh_small", "s_large"):
        if not adm[key]:
            flags.append(f"admissibility: {key}")

    ts = u.ts
    nt = len(ts)
    logw_t = _trapezoid_logweights(ts)[:, None]
    lphi = 2.0 * s * weight.phi(ts, pts)  # log of e^{2 s phi}, shape (nt, n)
    qf = q.reshape(-1)

    d_plus, d_minus, pde = [], [], []
    for k in range(nt):
        fk = ScalarField(box, vals[k])
        dp = sum(forward_diff(fk, j).on(box).values ** 2 for j in range(box.d))
        dm = sum(backward_diff(fk, j).on(box).values ** 2 for j in range(box.d))
        d_plus.append(np.sqrt(dp).reshape(-1))
        d_minus.append(np.sqrt(dm).reshape(-1))
        res = utt[k] + laplacian(fk).on(box).values - vq * vals[k]
        pde.append(np.where(q, res, 0.0).reshape(-1))
    d_plus, d_minus, pde = map(np.array, (d_plus, d_minus, pde))
    flat = vals.reshape(nt, -1)
    ut_f = ut.reshape(nt, -1)

    st = logw_t + lphi
    ls, l3 = math.log(s), 3 * math.log(s)
    sel = qf[None, :]
    lhs = {
        "s3_u": l3 + _log_weighted_sq(st, np.where(sel, flat, 0)),
        "s_ut": ls + _log_weighted_sq(st, np.where(sel, ut_f, 0)),
        "s_Dplus": ls + _log_weighted_sq(st, np.where(sel, d_plus, 0)),
        "s_Dminus": ls + _log_weighted_sq(st, np.where(sel, d_minus, 0)),
        "s_ut0": ls + _log_weighted_sq(lphi[0], np.where(qf, ut_f[0], 0)),
        "s_utT": ls + _log_weighted_sq(lphi[-1], np.where(qf, ut_f[-1], 0)),
        "s3_uT": l3 + _log_weighted_sq(lphi[-1], np.where(qf, flat[-1], 0)),
    }
    om = qf & mask.flat
    rhs = {
        "pde": _log_weighted_sq(st, pde),
        "s_DplusT": ls + _log_weighted_sq(lphi[-1], np.where(qf, d_plus[-1], 0)),
        "s_DminusT": ls + _log_weighted_sq(lphi[-1], np.where(qf, d_minus[-1], 0)),
        "s_ut0_omega": ls + _log_weighted_sq(lphi[0], np.where(om, ut_f[0], 0)),
    }
    log_lhs = float(logsumexp(list(lhs.values()))) if any(v > -math.inf for v in lhs.values()) else -math.inf
    log_rhs = float(logsumexp(list(rhs.values()))) if any(v > -math.inf for v in rhs.values()) else -math.inf
    return CarlemanSides(log_lhs, log_rhs, lhs, rhs, not any(f.startswith("admissibility") for f in flags), flags)


def _q_box(box: LatticeBox, weight: CarlemanWeight) -> LatticeBox:
    c = box.index_of(weight.cube_centre)
    n = int(math.floor(weight.L / 2 / box.h + 1e-9))
    return LatticeBox(box.h, tuple(k - n for k in c), tuple(k + n for k in c))


def sine_mode_field(box: LatticeBox, cube_centre, L: float, T_star: float, modes, time_coeffs, n_time: int = 81):
    """u(t, x) = a(t) sum_i w_i prod_j sin(k_ij pi (x_j - x_Qj + L/2) / L) with exact time derivatives.

    ``modes`` is a list of (weight, k-vector) pairs; ``time_coeffs = (p, q, r)``
    gives a(t) = t (p + q t / T* + r sin(pi t / T*)), so u(0) = 0 and u
    vanishes on the boundary of Q.
    """
    cube_centre = np.atleast_1d(np.asarray(cube_centre, dtype=float))
    p, qc, rc = time_coeffs
    w = math.pi / T_star

    def a(t):
        return t * (p + qc * t / T_star + rc * math.sin(w * t))

    def a1(t):
        return p + 2 * qc * t / T_star + rc * (math.sin(w * t) + w * t * math.cos(w * t))

    def a2(t):
        return 2 * qc / T_star + rc * (2 * w * math.cos(w * t) - w * w * t * math.sin(w * t))

    def spatial(x):
        inside = np.all(np.abs(x - cube_centre) <= L / 2 + 1e-9 * box.h, axis=1)
        out = np.zeros(len(x))
        for wt, k in modes:
            term = np.full(len(x), float(wt))
            for j, kj in enumerate(k):
                term *= np.sin(kj * math.pi * (x[:, j] - cube_centre[j] + L / 2) / L)
            out += term
        return np.where(inside, out, 0.0)

    ts = np.linspace(0.0, T_star, n_time)
    return SpaceTimeField.from_function(box, ts, lambda t, x: a(t) * spatial(x),
                                        dt=lambda t, x: a1(t) * spatial(x), dtt=lambda t, x: a2(t) * spatial(x))
