"""The truncated Schrodinger operator P_h = -Delta_h + V and its spectral calculus.

Everything downstream (projectors, semigroup, controls) works in the
eigenbasis of P_h on a box with zero Dirichlet extension, so the semigroup is
exact rather than time stepped.
"""
from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from .lattice import (
    LatticeBox,
    LatticeDomainError,
    ScalarField,
    backward_diff,
    dirichlet_laplacian_matrix,
    forward_diff,
    laplacian,
)
from .potentials import PotentialSpec, restrict

DENSE_LIMIT = 4000
RESIDUAL_TOL = 1e-10


class EigensolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class SolverError(RuntimeError):
    pass


class NegativeSpectrumWarning(UserWarning):
    pass


def operator_matrix(box: LatticeBox, potential: ScalarField) -> sparse.csr_matrix:
    """Sparse matrix of -Delta_h + V on the box (C-order unknowns)."""
    v = potential.on(box).flat.real
    return sparse.csr_matrix(-dirichlet_laplacian_matrix(box) + sparse.diags(v))


def mesh_cap(h: float, eps0: float = 1.0) -> int:
    """J_h = floor(log2(eps0 / h^2) / 2), i.e. the largest J with 4^J <= eps0/h^2."""
    x = eps0 / h**2
    if x < 1:
        raise LatticeDomainError(f"eps0/h^2 = {x:g} < 1 leaves no dyadic threshold")
    j = int(math.floor(math.log(x, 4)))
    slack = 1 + 1e-12
    while 4 ** (j + 1) <= x * slack:
        j += 1
    while j > 0 and 4**j > x * slack:
        j -= 1
    return j


@dataclass(frozen=True)
class SpectralThreshold:
    """Dyadic threshold mu = 4^j with the mesh cap J_h."""

    j: int
    h: float
    eps0: float = 1.0

    def __post_init__(self):
        if self.j < 0 or self.j > self.cap:
            raise LatticeDomainError(f"dyadic index {self.j} outside [0, J_h={self.cap}]")

    @property
    def mu(self) -> float:
        return float(4**self.j)

    @property
    def cap(self) -> int:
        return mesh_cap(self.h, self.eps0)


class SpectralProjector:
    """Orthogonal projector onto span{phi_k : lambda_k <= mu}."""

    def __init__(self, dec: "SpectralDecomposition", mu: float):
        self.dec = dec
        self.mu = mu
        self.indices = dec.indices_below(mu)

    @property
    def rank(self) -> int:
        return len(self.indices)

    def __call__(self, u: ScalarField) -> ScalarField:
        phi = self.dec.vectors[:, self.indices]
        x = u.on(self.dec.box).flat
        return ScalarField(self.dec.box, phi @ (phi.T @ x))

    def matrix(self) -> np.ndarray:
        phi = self.dec.vectors[:, self.indices]
        return phi @ phi.T


@dataclass
class SpectralDecomposition:
    """Ascending eigenvalues and orthonormal eigenvectors (columns) of P_h."""

    box: LatticeBox
    potential: ScalarField
    eigenvalues: np.ndarray
    vectors: np.ndarray
    complete: bool = True

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def eigenvector(self, k: int) -> ScalarField:
        return ScalarField(self.box, self.vectors[:, k])

    def tie_tol(self, mu: float) -> float:
        return 1e-12 * max(1.0, abs(mu))

    def indices_below(self, mu: float) -> np.ndarray:
        """Indices with lambda_k <= mu (ties included up to rounding)."""
        k = np.flatnonzero(self.eigenvalues <= mu + self.tie_tol(mu))
        if not self.complete and len(k) == self.n:
            raise EigensolverError(f"partial decomposition does not reach mu={mu:g}")
        return k

    def dim(self, mu: float) -> int:
        return len(self.indices_below(mu))

    def basis(self, mu: float) -> np.ndarray:
        return self.vectors[:, self.indices_below(mu)]

    def next_eigenvalue(self, mu: float) -> float:
        """Smallest eigenvalue strictly above mu (inf if none)."""
        above = self.eigenvalues[self.eigenvalues > mu + self.tie_tol(mu)]
        return float(above[0]) if above.size else math.inf

    def coefficients(self, u: ScalarField) -> np.ndarray:
        return self.vectors.T @ u.on(self.box).flat

    def synthesize(self, coeffs: np.ndarray, indices: Optional[Sequence[int]] = None) -> ScalarField:
        phi = self.vectors if indices is None else self.vectors[:, indices]
        return ScalarField(self.box, phi @ np.asarray(coeffs))

    def spectral_projector(self, mu: float) -> SpectralProjector:
        return SpectralProjector(self, mu)

    def project(self, mu: float, u: ScalarField) -> ScalarField:
        return self.spectral_projector(mu)(u)

    def _require_complete(self):
        if not self.complete:
            raise EigensolverError("operation needs the full spectrum")

    def semigroup_apply(self, t: float, u: ScalarField) -> ScalarField:
        """S(t)u = sum_k exp(-lambda_k t) <u, phi_k> phi_k."""
        if t < 0:
            raise LatticeDomainError("semigroup time must be nonnegative")
        self._require_complete()
        if t == 0:
            return u.on(self.box)
        return self.synthesize(np.exp(-self.eigenvalues * t) * self.coefficients(u))

    def operator(self) -> sparse.csr_matrix:
        return operator_matrix(self.box, self.potential)

    def residuals(self) -> np.ndarray:
        p = self.operator()
        r = p @ self.vectors - self.vectors * self.eigenvalues
        return np.linalg.norm(r, axis=0)

    # -- persistence --------------------------------------------------------
    def save(self, path) -> None:
        np.savez(path, eigenvalues=self.eigenvalues, vectors=self.vectors, potential=self.potential.values,
                 h=self.box.h, lo=self.box.lo, hi=self.box.hi, complete=self.complete)

    @classmethod
    def load(cls, path) -> "SpectralDecomposition":
        z = np.load(path)
        box = LatticeBox(float(z["h"]), tuple(z["lo"]), tuple(z["hi"]))
        return cls(box, ScalarField(box, z["potential"]), z["eigenvalues"], z["vectors"], bool(z["complete"]))

    def eigenvalues_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "lambda"])
            for k, lam in enumerate(self.eigenvalues):
                w.writerow([k, repr(float(lam))])


def _normalize_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1
    return vectors * signs


def assemble_and_decompose(box: LatticeBox, potential, n_eigs: Optional[int] = None,
                           check: bool = True) -> SpectralDecomposition:
    """Eigendecomposition of -Delta_h + V on the box.

    ``potential`` is a PotentialSpec or a field on the box.  Up to
    ``DENSE_LIMIT`` unknowns (or when ``n_eigs`` is None) a dense symmetric
    solver returns the full spectrum; otherwise the lowest ``n_eigs`` pairs are
    computed with a shift-invert Lanczos solver.
    """
    pot = restrict(potential, box) if isinstance(potential, PotentialSpec) else potential.on(box)
    if pot.is_complex:
        raise LatticeDomainError("complex potentials are not supported")
    p = operator_matrix(box, pot)
    n = box.n_nodes
    if n_eigs is None or n_eigs >= n or n <= DENSE_LIMIT:
        if n > 4 * DENSE_LIMIT and n_eigs is None:
            raise EigensolverError(f"{n} unknowns is too many for a dense solve; pass n_eigs")
        lam, vec = linalg.eigh(p.toarray())
        complete = True
        if n_eigs is not None and n_eigs < n:
            lam, vec, complete = lam[:n_eigs], vec[:, :n_eigs], False
    else:
        shift = float(np.min(pot.flat)) - 1.0
        try:
            lam, vec = splinalg.eigsh(p, k=n_eigs, sigma=shift, which="LM", tol=1e-13)
        except splinalg.ArpackNoConvergence as exc:
            raise EigensolverError(f"partial eigensolve did not converge: {exc}") from exc
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
        complete = False
    dec = SpectralDecomposition(box, pot, lam, _normalize_signs(vec), complete)
    if check:
        res = dec.residuals()
        bad = res > RESIDUAL_TOL * np.maximum(1.0, np.abs(lam))
        if np.any(bad):
            raise EigensolverError(f"{int(bad.sum())} eigenpairs exceed the residual tolerance", res)
    return dec


def decomposition_key(box: LatticeBox, potential: ScalarField) -> str:
    h = hashlib.sha256()
    h.update(repr((box.h, box.lo, box.hi)).encode())
    h.update(np.ascontiguousarray(potential.on(box).values, dtype=float).tobytes())
    return h.hexdigest()[:20]


def decompose_cached(box: LatticeBox, potential, cache_dir=None) -> SpectralDecomposition:
    """Full decomposition, memoised on disk under ``cache_dir`` when given."""
    pot = restrict(potential, box) if isinstance(potential, PotentialSpec) else potential.on(box)
    if cache_dir is None:
        return assemble_and_decompose(box, pot)
    path = Path(cache_dir) / f"dec_{decomposition_key(box, pot)}.npz"
    if path.exists():
        return SpectralDecomposition.load(path)
    dec = assemble_and_decompose(box, pot)
    path.parent.mkdir(parents=True, exist_ok=True)
    dec.save(path)
    return dec


# -- localization -------------------------------------------------------------

@dataclass
class LocalizationReport:
    mu: float
    cutoff: float
    ratios: np.ndarray
    subspace_ratio: float
    passes: bool


def localization_cutoff(mu: float, beta: float, c: float) -> float:
    """L_mu = (2 mu / c)^(1/beta)."""
    return (2.0 * mu / c) ** (1.0 / beta)


def cube_mask(box: LatticeBox, center: Sequence[float], half_width: float, open_: bool = False) -> np.ndarray:
    """Boolean array of nodes with |x - center|_inf <= half_width (< if ``open_``)."""
    dist = np.max(np.abs(box.coords() - np.asarray(center, dtype=float).reshape((-1,) + (1,) * box.d)), axis=0)
    eps = 1e-9 * box.h
    return dist < half_width - eps if open_ else dist <= half_width + eps


def localization_check(dec: SpectralDecomposition, mu: float, beta: float, c: float,
                       cutoff: Optional[float] = None) -> LocalizationReport:
    """Mass ratios ||phi||^2 / ||phi||^2_{[-L, L]^d} over E_mu.

    ``cutoff`` defaults to L_mu.  The cube is taken with half-width L so that
    every node outside it has |x| > L.  ``ratios`` holds the value for each
    eigenvector; ``subspace_ratio`` is the worst case over all of E_mu, and
    the check passes when it is at most 2.
    """
    lam = localization_cutoff(mu, beta, c) if cutoff is None else float(cutoff)
    if any(w < lam - 1e-9 * dec.box.h for w in _box_reach(dec.box)):
        raise LatticeDomainError(f"box does not contain the cube of half-width {lam:g}")
    phi = dec.basis(mu)
    if phi.shape[1] == 0:
        return LocalizationReport(mu, lam, np.zeros(0), 1.0, True)
    inside = cube_mask(dec.box, np.zeros(dec.box.d), lam).reshape(-1)
    a = phi[inside]
    mass_in = np.sum(a**2, axis=0)
    ratios = np.sum(phi**2, axis=0) / mass_in
    sub = 1.0 / float(np.linalg.eigvalsh(a.T @ a)[0])
    return LocalizationReport(mu, lam, ratios, sub, bool(sub <= 2.0 and np.all(ratios <= 2.0)))


def _box_reach(box: LatticeBox):
    return [min(-a, b) * box.h for a, b in zip(box.lo, box.hi)]


# -- Caccioppoli ----------------------------------------------------------------

@dataclass
class CaccioppoliReport:
    lhs: float
    rhs: float
    lhs_plus: float
    lhs_minus: float
    v_sup: float
    passes: bool
    solution: ScalarField


def caccioppoli_check(box: LatticeBox, potential, L: float, x0: Sequence[float], boundary_data) -> CaccioppoliReport:
    """Solve (-Delta_h + V) phi = 0 inside Q_{2L}(x0) and compare both sides.

    Q_{2L}(x0) is the closed cube |x - x0|_inf <= L.  The equation is imposed
    at nodes with |x - x0|_inf < L and ``boundary_data`` prescribes phi on the
    outer layer |x - x0|_inf = L (a callable on points of shape (n, d), a
    field, or an array over the outer-layer nodes in C order).

    lhs = max over +/- of sum_j ||D_j^+- phi||^2 on |x - x0|_inf <= L/2,
    rhs = 2 (72 / L^2 + max_{Q_{2L}} |V|) ||phi||^2_{Q_{2L}}.
    """
    h, d = box.h, box.d
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    centre = box.index_of(x0)
    n = int(math.floor(L / h + 1e-9))
    if n < 2:
        raise LatticeDomainError("L must cover at least two mesh steps")
    cube = LatticeBox(h, tuple(k - n for k in centre), tuple(k + n for k in centre))
    if not box.contains_box(cube):
        raise LatticeDomainError("Q_{2L}(x0) is not inside the box")
    inner = LatticeBox(h, tuple(k - n + 1 for k in centre), tuple(k + n - 1 for k in centre))
    outer = ~cube_mask(cube, x0, L, open_=True)

    if callable(boundary_data):
        g = np.asarray(boundary_data(cube.points()), dtype=float).reshape(cube.shape)
    elif isinstance(boundary_data, ScalarField):
        g = boundary_data.on(cube).values.real
    else:
        g = np.zeros(cube.shape)
        g[outer] = np.asarray(boundary_data, dtype=float).reshape(-1)
    g = np.where(outer, g, 0.0)
    phi_b = ScalarField(cube, g)

    pot = restrict(potential, cube) if isinstance(potential, PotentialSpec) else potential.on(cube)
    v_sup = float(np.max(np.abs(pot.values)))
    a = operator_matrix(inner, pot.on(inner)).tocsc()
    rhs = laplacian(phi_b).on(inner).flat
    if not np.any(rhs):
        interior = np.zeros(inner.n_nodes)
    else:
        try:
            lu = splinalg.splu(a)
        except RuntimeError as exc:
            raise SolverError(f"interior system is singular: {exc}") from exc
        interior = lu.solve(rhs)
        if not np.all(np.isfinite(interior)):
            raise SolverError("interior system is singular")
    phi = phi_b + ScalarField(inner, interior)

    half = cube_mask(cube.grow(1), x0, L / 2)
    plus = sum(float(np.sum(forward_diff(phi, j).values[half] ** 2)) for j in range(d))
    minus = sum(float(np.sum(backward_diff(phi, j).values[half] ** 2)) for j in range(d))
    lhs = max(plus, minus)
    bound = 2.0 * (72.0 / L**2 + v_sup) * phi.norm() ** 2
    return CaccioppoliReport(lhs, bound, plus, minus, v_sup, bool(lhs <= bound), phi)


# -- elliptic lift ----------------------------------------------------------------

def sinhc(lam: np.ndarray, t: float) -> np.ndarray:
    """sinh(sqrt(lam) t) / sqrt(lam), continued analytically to lam <= 0."""
    lam = np.asarray(lam, dtype=float)
    out = np.empty_like(lam)
    small = np.abs(lam) * t * t < 1e-6
    z = lam[small] * t * t
    out[small] = t * (1 + z / 6 + z * z / 120)
    pos = (lam > 0) & ~small
    r = np.sqrt(lam[pos])
    out[pos] = np.sinh(r * t) / r
    neg = (lam < 0) & ~small
    r = np.sqrt(-lam[neg])
    out[neg] = np.sin(r * t) / r
    return out


def elliptic_lift(dec: SpectralDecomposition, mu: float, v: ScalarField, t: float) -> ScalarField:
    """sum_{lambda_k <= mu} c_k sinh(sqrt(lambda_k) t)/sqrt(lambda_k) phi_k with c_k = <v, phi_k>.

    ``v`` is projected onto E_mu first.  Negative eigenvalues use the
    sin continuation and emit a NegativeSpectrumWarning.
    """
    if t < 0:
        raise LatticeDomainError("lift time must be nonnegative")
    idx = dec.indices_below(mu)
    lam = dec.eigenvalues[idx]
    if np.any(lam < 0):
        warnings.warn("negative eigenvalues in E_mu; using the oscillatory continuation", NegativeSpectrumWarning)
    c = dec.vectors[:, idx].T @ v.on(dec.box).flat
    return dec.synthesize(sinhc(lam, t) * c, idx)
