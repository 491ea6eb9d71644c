"""The free lattice heat kernel, its bounds, tails and the Feynman-Kac comparison.

In one dimension with unit mesh the kernel of e^{t Delta} is

    p1(tau, u) = (1/2pi) int_{-pi}^{pi} exp(-2 tau (1 - cos eta)) exp(i u eta) d eta
               = exp(-2 tau) I_u(2 tau),

and on h Z^d it factorises as p(t, x, y) = h^{-d} prod_j p1(t/h^2, (x_j - y_j)/h).
``kernel_1d`` evaluates the integral by adaptive quadrature; the vectorised
helpers use the exponentially scaled Bessel function from scipy.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, special

from ._fit import LineFit, fit_line
from .lattice import LatticeBox, LatticeDomainError, ScalarField
from .potentials import PotentialSpec, restrict
from .schrodinger import assemble_and_decompose


class PreconditionWarning(UserWarning):
    pass


# -- the kernel ---------------------------------------------------------------

def kernel_1d(tau: float, u: int) -> float:
    """p1(tau, u) by adaptive quadrature of the Fourier integral."""
    if tau < 0:
        raise LatticeDomainError("tau must be nonnegative")
    u = abs(int(u))
    if tau == 0:
        return 1.0 if u == 0 else 0.0

    def f(eta):
        # 1 - cos(eta) = 2 sin^2(eta/2) avoids cancellation near 0
        return math.exp(-4.0 * tau * math.sin(0.5 * eta) ** 2)

    # the integrand is concentrated in |eta| <~ 1/sqrt(tau); split there
    cut = min(math.pi, 12.0 / math.sqrt(tau))
    opts = dict(epsabs=1e-15, epsrel=1e-13, limit=400)
    if u:
        opts.update(weight="cos", wvar=u)
    with warnings.catch_warnings():
        # tolerances sit at the rounding floor; quad flags that but the value is converged
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        a = integrate.quad(f, 0.0, cut, **opts)[0]
        b = integrate.quad(f, cut, math.pi, **opts)[0] if cut < math.pi else 0.0
    return (a + b) / math.pi


def kernel_1d_array(tau, u) -> np.ndarray:
    """Vectorised p1(tau, u) = ive(u, 2 tau)."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise LatticeDomainError("tau must be nonnegative")
    return special.ive(np.abs(np.asarray(u)), 2.0 * tau)


def log_kernel_1d_array(tau, u) -> np.ndarray:
    """log p1(tau, u), finite even where p1 underflows.

    Where ive underflows |u| is far above 2 tau and the power series
    I_u(x) = (x/2)^u / u! * sum_k (x^2/4)^k / (k! (u+1)_k) is summed in
    log form.  Its terms peak near k* = (sqrt(u^2 + 4 tau^2) - u) / 2 and
    fall off like a Gaussian of width about sqrt(k*), so the sum runs to
    k* + 12 sqrt(k*) + 40.
    """
    tau, u = np.broadcast_arrays(np.asarray(tau, dtype=float), np.abs(np.asarray(u, dtype=float)))
    shape = tau.shape
    tau, u = tau.reshape(-1), u.reshape(-1)
    if np.any(tau <= 0):
        raise LatticeDomainError("tau must be positive")
    with np.errstate(divide="ignore"):
        out = np.log(special.ive(u, 2.0 * tau))
    deep = ~np.isfinite(out) | (out < -650)
    if np.any(deep):
        t, v = tau[deep], u[deep]
        peak = 0.5 * (np.sqrt(v * v + 4.0 * t * t) - v)
        k = np.arange(int(np.max(peak + 12.0 * np.sqrt(peak) + 40.0)))[:, None]
        logq = 2.0 * np.log(t)  # log(x^2 / 4) with x = 2 tau
        terms = k * logq - special.gammaln(k + 1) - (special.gammaln(v + k + 1) - special.gammaln(v + 1))
        series = special.logsumexp(terms, axis=0)
        out[deep] = -2.0 * t + v * np.log(t) - special.gammaln(v + 1) + series
    return out.reshape(shape) if shape else out[0]


def _lattice_offsets(h: float, x, y) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    du = (x - y) / h
    k = np.round(du)
    if np.any(np.abs(du - k) > 1e-9 * np.maximum(1.0, np.abs(du))):
        raise LatticeDomainError("points are not on the lattice h Z^d")
    return k.astype(int)


def kernel(d: int, h: float, t: float, x, y, quadrature: bool = True) -> float:
    """p_{d,h}(t, x, y) = h^{-d} prod_j p1(t/h^2, |x_j - y_j|/h)."""
    if t <= 0:
        raise LatticeDomainError("t must be positive")
    u = _lattice_offsets(h, x, y)
    if u.shape != (d,):
        raise LatticeDomainError(f"expected points with {d} coordinates")
    tau = t / h**2
    vals = [kernel_1d(tau, k) if quadrature else float(kernel_1d_array(tau, k)) for k in u]
    return float(np.prod(vals)) / h**d


def kernel_field(box: LatticeBox, t: float, y: Sequence[float]) -> ScalarField:
    """x -> p_{d,h}(t, x, y) on the nodes of the box."""
    if t <= 0:
        raise LatticeDomainError("t must be positive")
    yk = np.asarray(box.index_of(y))
    tau = t / box.h**2
    out = np.ones(box.shape)
    for j in range(box.d):
        shape = [1] * box.d
        shape[j] = -1
        out = out * kernel_1d_array(tau, box.axis_indices(j) - yk[j]).reshape(shape)
    return ScalarField(box, out / box.h**box.d)


def kernel_sup_bound(d: int, h: float, t_min: float, t_max: float, v_sup: float = 0.0) -> float:
    """Upper bound for p_{V,h}(t, x, y) over t_min <= t <= t_max.

    The free kernel is maximal on the diagonal and decreasing in t, so the
    bound is e^{t_max ||V||} p_{d,h}(t_min, x, x).
    """
    return math.exp(t_max * v_sup) * float(kernel_1d_array(t_min / h**2, 0)) ** d / h**d


# -- zeta and Pang's envelope -----------------------------------------------------

def zeta(s):
    """zeta(s) = arcsinh(s) + (1 - sqrt(s^2 + 1))/s, in a cancellation-free form."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise LatticeDomainError("zeta is defined for s >= 0")
    out = np.arcsinh(s) - s / (1.0 + np.sqrt(1.0 + s * s))
    return float(out) if out.ndim == 0 else out


def zeta_bounds_check(s) -> bool | np.ndarray:
    """Whether (1/2) ln(1+s) <= zeta(s) <= ln(1+s), allowing for rounding."""
    s = np.asarray(s, dtype=float)
    z = zeta(s)
    lg = np.log1p(s)
    tol = 4 * np.finfo(float).eps * np.maximum(lg, 1e-300)
    ok = (0.5 * lg <= z + tol) & (z <= lg + tol)
    return bool(ok) if np.ndim(ok) == 0 else ok


def log_pang_envelope(tau, u):
    """log of min(|u|^{-1/2}, tau^{-1/2}) exp(-|u| zeta(|u| / (2 tau)))."""
    tau = np.asarray(tau, dtype=float)
    u = np.abs(np.asarray(u, dtype=float))
    with np.errstate(divide="ignore"):
        log_pref = -0.5 * np.maximum(np.log(u), np.log(tau))
    return log_pref - u * zeta(u / (2 * tau))


def pang_envelope(tau, u):
    """min(|u|^{-1/2}, tau^{-1/2}) exp(-|u| zeta(|u| / (2 tau)))."""
    return np.exp(log_pang_envelope(tau, u))


@dataclass
class PangRatios:
    ratio_upper: np.ndarray
    ratio_lower: np.ndarray


def pang_bounds_check(tau, u) -> PangRatios:
    """p1 / envelope, from above and from below.

    The envelope bounds p1 on both sides up to constants, so the upper check
    is that p1/envelope stays bounded above and the lower check that it stays
    bounded away from zero.  Both ratios are returned on log-safe scales.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise LatticeDomainError("tau must be positive")
    u = np.asarray(u)
    r = np.exp(log_kernel_1d_array(tau, u) - log_pang_envelope(tau, u))
    return PangRatios(r, r.copy())


def pang_product_bound(d: int, h: float, t: float, u) -> float:
    """t^{-d/2} exp(-sum_j (|u_j|/2) ln(1 + h^2 |u_j| / (2t))): the simplified upper envelope."""
    u = np.abs(np.asarray(u, dtype=float)).reshape(-1)
    return t ** (-d / 2) * math.exp(-np.sum(0.5 * u * np.log1p(h * h * u / (2 * t))))


# -- norms and tails ----------------------------------------------------------------

def p1_norm_sq(tau: float) -> float:
    """||p1(tau, .)||^2_{l2(Z)} = e^{-4 tau} I_0(4 tau) by Parseval."""
    return float(special.ive(0, 4.0 * tau))


def p1_norm_sq_quadrature(tau: float) -> float:
    """Parseval integral (1/pi) int_0^pi exp(-8 tau sin^2(eta/2)) d eta."""
    cut = min(math.pi, 12.0 / math.sqrt(max(tau, 1e-300)))
    f = lambda e: math.exp(-8.0 * tau * math.sin(0.5 * e) ** 2)  # noqa: E731
    a = integrate.quad(f, 0, cut, epsabs=1e-15, epsrel=1e-13, limit=400)[0]
    b = integrate.quad(f, cut, math.pi, epsabs=1e-15, epsrel=1e-13, limit=400)[0] if cut < math.pi else 0.0
    return (a + b) / math.pi


@dataclass
class Ell2Check:
    norm_sq: float
    predicted: float
    ratio: float


def ell2_norm_asymptotic_check(d: int, h: float, t: float) -> Ell2Check:
    """||h^{d/2} p_{d,h}(t, ., y)||^2 against its large-tau asymptote (2 sqrt(2 pi t))^{-d}.

    Equivalently ||p1(tau, .)||^{2d} against (2 sqrt(2 pi tau))^{-d} with tau = t/h^2.
    """
    tau = t / h**2
    if tau < 100 * (1 - 1e-12):
        warnings.warn(f"tau = {tau:g} < 100: the asymptotic regime is not reached", PreconditionWarning)
    n1 = p1_norm_sq_quadrature(tau)
    norm_sq = n1**d / h**d
    predicted = (2.0 * math.sqrt(2.0 * math.pi * t)) ** (-d)
    return Ell2Check(norm_sq, predicted, norm_sq / predicted)


def _p1_sq_tail(tau: float, start: int, rel: float = 1e-15) -> float:
    """sum_{u >= start} p1(tau, u)^2 with a certified geometric remainder bound.

    The terms are decreasing in u and so are the ratios I_{u+1}/I_u, hence
    after term a_n the rest is at most a_n r / (1 - r) with r = a_{n+1}/a_n.
    """
    total = 0.0
    block = 256
    u = start
    while True:
        a = kernel_1d_array(tau, np.arange(u, u + block + 1)) ** 2
        total += float(np.sum(a[:-1]))
        last, nxt = a[-2], a[-1]
        if last == 0.0:
            return total
        r = nxt / last
        if r < 1 and nxt / (1 - r) <= rel * max(total, 1e-300):
            return total + float(nxt / (1 - r))
        u += block


def tail_mass_sq(d: int, h: float, t: float, L: float) -> float:
    """sum over x with x - y outside [-L, L]^d of |h^{d/2} p_{d,h}(t, x, y)|^2.

    Writing S_all = ||p1||^2, S_in for the sum over |u| <= L/h and S_out for
    the rest, the value is h^{-d} (S_all^d - S_in^d) = h^{-d} S_out sum_k S_all^k S_in^{d-1-k}.
    """
    if t <= 0 or L <= 0:
        raise LatticeDomainError("t and L must be positive")
    tau = t / h**2
    n = int(math.floor(L / h + 1e-9))
    s_out = 2.0 * _p1_sq_tail(tau, n + 1)
    s_all = p1_norm_sq(tau)
    s_in = s_all - s_out
    poly = sum(s_all**k * s_in ** (d - 1 - k) for k in range(d))
    return s_out * poly / h**d


@dataclass
class TailFit:
    nu: float
    log_gamma: float
    r2: float
    fit: LineFit


def tail_fit(d: int, h: float, t: float, Ls: Sequence[float]) -> TailFit:
    """Least squares of log tail_mass_sq against L^2: log gamma - nu L^2."""
    Ls = np.asarray(Ls, dtype=float)
    y = np.log([tail_mass_sq(d, h, t, L) for L in Ls])
    f = fit_line(Ls**2, y)
    return TailFit(-f.slope, f.intercept, f.r2, f)


# -- Feynman-Kac ---------------------------------------------------------------------

@dataclass
class FeynmanKacReport:
    holds: bool
    violations: int
    certified_nodes: int
    v_sup: float
    max_truncation: float
    p_v: ScalarField
    p_free: ScalarField


def feynman_kac_sandwich_check(box: LatticeBox, potential, t: float, x0: Sequence[float],
                               tol: float = 1e-10) -> FeynmanKacReport:
    """Compare p_{V,h}(t, ., x0) on the truncated box with the free full-lattice kernel.

    p_{V,h} is the truncated semigroup applied to h^{-d} delta_{x0}.  The
    truncated free kernel p_box never exceeds the full one, so the upper bound
    e^{t||V||} p is checked at every node; the lower bound is checked where
    the truncation defect e^{t||V||}(p - p_box) is below ``tol``, with that
    defect as the allowance.  ||V|| is the maximum over the box.
    """
    pot = restrict(potential, box) if isinstance(potential, PotentialSpec) else potential.on(box)
    v_sup = float(np.max(np.abs(pot.values)))
    delta = ScalarField.delta(box, box.index_of(x0), box.h ** (-box.d))
    p_v = assemble_and_decompose(box, pot).semigroup_apply(t, delta)
    p_box = assemble_and_decompose(box, ScalarField.zeros(box)).semigroup_apply(t, delta)
    p = kernel_field(box, t, x0)
    grow = math.exp(t * v_sup)
    defect = grow * np.maximum(p.values - p_box.values, 0.0)
    certified = defect < tol
    # the eigenbasis synthesis carries an absolute rounding error of a few ulps of max p
    slack = 1e-12 * float(np.max(p.values))
    upper_bad = p_v.values > grow * p.values + slack
    lower_bad = certified & (p_v.values < p.values / grow - defect - slack)
    bad = int(np.sum(upper_bad | lower_bad))
    return FeynmanKacReport(bad == 0, bad, int(certified.sum()), v_sup, float(defect.max()), p_v, p)
