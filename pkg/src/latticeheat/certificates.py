"""Measured spectral-inequality constants and the fit of their growth in mu.

For an observation mask omega and a threshold mu, the sharp constant in

    ||u||^2 <= C ||u||^2_{omega}    for all u in E_mu

is C* = 1 / sigma_min, where sigma_min is the smallest eigenvalue of the
Gram matrix <1_omega phi_i, 1_omega phi_k> over an orthonormal basis of E_mu.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ._fit import LineFit, fit_line
from .geometry import ObservationMask
from .schrodinger import SpectralDecomposition

SINGULAR_TOL = 1e-14


class FitError(ValueError):
    pass


@dataclass
class SpectralCertificate:
    mu: float
    dim: int
    c_star: float
    sigma_min: float
    direction: Optional[np.ndarray]  # minimising unit vector in E_mu (node values)
    observable: bool

    @property
    def log_c(self) -> float:
        return math.log(self.c_star) if self.observable else math.inf


def restricted_gram(dec: SpectralDecomposition, mu: float, mask: ObservationMask) -> np.ndarray:
    """<1_omega phi_i, 1_omega phi_k> over the eigenvectors with lambda <= mu."""
    phi = dec.basis(mu)[mask.flat]
    return phi.T @ phi


def optimal_constant(dec: SpectralDecomposition, mu: float, mask: ObservationMask) -> SpectralCertificate:
    idx = dec.indices_below(mu)
    if len(idx) == 0:
        raise ValueError(f"E_mu is empty for mu={mu:g} (lambda_0={dec.eigenvalues[0]:g})")
    phi = dec.vectors[:, idx]
    g = phi[mask.flat].T @ phi[mask.flat]
    w, v = np.linalg.eigh(g)
    sigma = float(w[0])
    direction = phi @ v[:, 0]
    if sigma <= SINGULAR_TOL:
        return SpectralCertificate(mu, len(idx), math.inf, sigma, direction, False)
    return SpectralCertificate(mu, len(idx), 1.0 / sigma, sigma, direction, True)


def certificate_sweep(dec: SpectralDecomposition, mask: ObservationMask, mus: Optional[Iterable[float]] = None,
                      mu_max: Optional[float] = None) -> list[SpectralCertificate]:
    """Certificates over a grid of thresholds.

    Without ``mus`` the grid is every eigenvalue up to ``mu_max``, i.e. one
    certificate per distinct subspace E_mu.  The Gram matrix is built once and
    its leading blocks are reused.
    """
    if mus is None:
        if mu_max is None:
            raise ValueError("give mus or mu_max")
        lam = dec.eigenvalues
        mus = lam[lam <= mu_max + dec.tie_tol(mu_max)]
    mus = list(mus)
    phi_w = dec.vectors[mask.flat]
    big = phi_w.T @ phi_w if mus else None
    out = []
    for mu in mus:
        m = dec.dim(mu)
        if m == 0:
            continue
        w, v = np.linalg.eigh(big[:m, :m])
        sigma = float(w[0])
        obs = sigma > SINGULAR_TOL
        out.append(SpectralCertificate(float(mu), m, 1.0 / sigma if obs else math.inf, sigma,
                                       dec.vectors[:, :m] @ v[:, 0], obs))
    return out


@dataclass
class KappaFit:
    kappa: float
    offset: float
    residual: float
    linear_residual: float
    linear_slope: float
    sublinear: bool
    n: int
    variant: str
    sqrt_fit: LineFit
    linear_fit: LineFit


def kappa_fit(certs: Sequence[SpectralCertificate], norms: dict, variant: str = "Linf") -> KappaFit:
    """Fit log C* = offset + kappa sqrt(1 + N + mu) and compare with a line in mu.

    ``N`` is ||V||_inf^{4/3} for ``variant="Linf"`` and ||V||_{W^{1,inf}} for
    ``variant="W1inf"``.  ``variant="plain"`` fits against sqrt(mu) itself and
    keeps only mu > 0.  The verdict ``sublinear`` is true when the square-root
    model has the smaller root-mean-square residual.
    """
    finite = [c for c in certs if c.observable]
    if variant == "plain":
        finite = [c for c in finite if c.mu > 0]
    if not finite:
        raise FitError("no finite certificates to fit")
    if len(finite) < 4:
        raise FitError(f"need at least 4 finite certificates, got {len(finite)}")
    if variant == "Linf":
        n = norms["Linf"] ** (4.0 / 3.0)
    elif variant == "W1inf":
        n = norms["W1inf"]
    elif variant == "plain":
        n = None
    else:
        raise ValueError(f"unknown variant {variant!r}")
    mu = np.array([c.mu for c in finite])
    y = np.array([c.log_c for c in finite])
    x = np.sqrt(mu) if n is None else np.sqrt(np.maximum(1.0 + n + mu, 0.0))
    f_sqrt = fit_line(x, y)
    f_lin = fit_line(mu, y)
    return KappaFit(f_sqrt.slope, f_sqrt.intercept, f_sqrt.residual, f_lin.residual, f_lin.slope,
                    bool(f_sqrt.residual < f_lin.residual), len(finite), variant, f_sqrt, f_lin)


def certificates_to_csv(path, h: float, certs: Sequence[SpectralCertificate], norms: Optional[dict] = None) -> None:
    """Columns h, mu, dim, C*, running kappa (fit on the rows so far, blank below 4 rows)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "mu", "dim", "c_star", "kappa_running"])
        for i, c in enumerate(certs):
            k = ""
            if i >= 3:
                try:
                    k = repr(kappa_fit(certs[: i + 1], norms or {"Linf": 0.0}).kappa)
                except FitError:
                    k = ""
            w.writerow([repr(h), repr(c.mu), c.dim, repr(c.c_star), k])
