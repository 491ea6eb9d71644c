"""Truncated lattices h*Z^d, fields on them, and the difference calculus.

A field stores values on the nodes of a :class:`LatticeBox` and is extended by
zero everywhere else on the lattice.  Difference operators act on that zero
extension exactly, so their output lives on the box grown by one layer (the
support of the result).  Use :meth:`ScalarField.on` to restrict back.

Norms and inner products carry no ``h**d`` weight.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import sparse


class LatticeDomainError(ValueError):
    """Raised for invalid boxes, axes or off-lattice points."""


_SNAP = 1e-9


def _as_index(value: float, h: float, what: str) -> int:
    k = value / h
    r = round(k)
    if abs(k - r) > _SNAP * max(1.0, abs(k)):
        raise LatticeDomainError(f"{what}={value!r} is not a multiple of h={h!r}")
    return int(r)


@dataclass(frozen=True)
class LatticeBox:
    """Nodes ``h*k`` with ``lo[j] <= k[j] <= hi[j]`` (inclusive).

    Values outside the box are zero (Dirichlet truncation of the full lattice).
    """

    h: float
    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        if not self.h > 0:
            raise LatticeDomainError("mesh h must be positive")
        if len(self.lo) != len(self.hi) or not self.lo:
            raise LatticeDomainError("lo/hi must be non-empty and of equal length")
        object.__setattr__(self, "lo", tuple(int(k) for k in self.lo))
        object.__setattr__(self, "hi", tuple(int(k) for k in self.hi))
        if any(b - a + 1 < 3 for a, b in zip(self.lo, self.hi)):
            raise LatticeDomainError("need at least 3 nodes per axis")

    @classmethod
    def centered(cls, d: int, h: float, half_width: float | Sequence[float]) -> "LatticeBox":
        """Box ``[-a, a]^d`` with ``a`` a multiple of ``h``; nodes at ``+-a`` are interior."""
        if d < 1:
            raise LatticeDomainError("dimension must be >= 1")
        widths = np.broadcast_to(np.asarray(half_width, dtype=float), (d,))
        n = [_as_index(float(a), h, "half_width") for a in widths]
        return cls(h, tuple(-k for k in n), tuple(n))

    @classmethod
    def from_counts(cls, h: float, counts: int | Sequence[int], d: int = 1) -> "LatticeBox":
        """Box with the given number of nodes per axis, roughly centred on 0."""
        counts = np.broadcast_to(np.asarray(counts, dtype=int), (d,) if np.ndim(counts) == 0 else np.shape(counts))
        lo = tuple(-(int(n) // 2) for n in counts)
        hi = tuple(a + int(n) - 1 for a, n in zip(lo, counts))
        return cls(h, lo, hi)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def half_width(self) -> tuple[float, ...]:
        return tuple((b - a) * self.h / 2 for a, b in zip(self.lo, self.hi))

    def axis_indices(self, axis: int) -> np.ndarray:
        return np.arange(self.lo[axis], self.hi[axis] + 1)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.axis_indices(axis) * self.h

    def index_grid(self) -> np.ndarray:
        """Integer node indices, shape ``(d, *shape)``."""
        return np.stack(np.meshgrid(*[self.axis_indices(j) for j in range(self.d)], indexing="ij"))

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(d, *shape)``."""
        return self.index_grid() * self.h

    def points(self) -> np.ndarray:
        """Node coordinates in lexicographic (C) order, shape ``(n_nodes, d)``."""
        return self.coords().reshape(self.d, -1).T

    def grow(self, k: int = 1) -> "LatticeBox":
        return LatticeBox(self.h, tuple(a - k for a in self.lo), tuple(b + k for b in self.hi))

    def union(self, other: "LatticeBox") -> "LatticeBox":
        self._check_compatible(other)
        return LatticeBox(self.h, tuple(map(min, self.lo, other.lo)), tuple(map(max, self.hi, other.hi)))

    def contains_box(self, other: "LatticeBox") -> bool:
        self._check_compatible(other)
        return all(a <= c and d_ <= b for a, b, c, d_ in zip(self.lo, self.hi, other.lo, other.hi))

    def index_of(self, point: Sequence[float]) -> tuple[int, ...]:
        """Lattice index of a coordinate point (raises if off-lattice)."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        if point.shape != (self.d,):
            raise LatticeDomainError(f"expected a point with {self.d} coordinates")
        return tuple(_as_index(float(x), self.h, "coordinate") for x in point)

    def contains_index(self, idx: Sequence[int]) -> bool:
        return all(a <= k <= b for a, k, b in zip(self.lo, idx, self.hi))

    def to_dict(self) -> dict:
        return {"h": self.h, "lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, data: dict) -> "LatticeBox":
        if "lo" in data:
            return cls(float(data["h"]), tuple(data["lo"]), tuple(data["hi"]))
        return cls.centered(int(data["d"]), float(data["h"]), data["half_width"])

    def _check_compatible(self, other: "LatticeBox"):
        if other.d != self.d or abs(other.h - self.h) > _SNAP * self.h:
            raise LatticeDomainError("boxes live on different lattices")


class ScalarField:
    """Values on the nodes of a box, zero elsewhere on the lattice."""

    __slots__ = ("box", "values")

    def __init__(self, box: LatticeBox, values):
        values = np.array(values, copy=True)
        if values.dtype.kind not in "fc":
            values = values.astype(float)
        if values.size != box.n_nodes:
            raise LatticeDomainError(f"expected {box.n_nodes} values, got {values.size}")
        values = values.reshape(box.shape)
        values.flags.writeable = False
        self.box = box
        self.values = values

    @classmethod
    def zeros(cls, box: LatticeBox, dtype=float) -> "ScalarField":
        return cls(box, np.zeros(box.shape, dtype=dtype))

    @classmethod
    def from_function(cls, box: LatticeBox, func: Callable[[np.ndarray], np.ndarray]) -> "ScalarField":
        """Sample ``func`` on the nodes; ``func`` receives points of shape ``(n, d)``."""
        return cls(box, np.asarray(func(box.points())).reshape(box.shape))

    @classmethod
    def delta(cls, box: LatticeBox, idx: Sequence[int], scale: float = 1.0) -> "ScalarField":
        if not box.contains_index(idx):
            raise LatticeDomainError(f"index {tuple(idx)} outside box")
        vals = np.zeros(box.shape)
        vals[tuple(k - a for k, a in zip(idx, box.lo))] = scale
        return cls(box, vals)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @property
    def is_complex(self) -> bool:
        return self.values.dtype.kind == "c"

    def at(self, idx: Sequence[int]):
        """Value at lattice index ``idx``; exactly zero outside the box."""
        if not self.box.contains_index(idx):
            return self.values.dtype.type(0)
        return self.values[tuple(k - a for k, a in zip(idx, self.box.lo))]

    def on(self, box: LatticeBox) -> "ScalarField":
        """The zero extension of this field, read on another box."""
        self.box._check_compatible(box)
        out = np.zeros(box.shape, dtype=self.values.dtype)
        src, dst = [], []
        for a, b, c, e in zip(self.box.lo, self.box.hi, box.lo, box.hi):
            lo, hi = max(a, c), min(b, e)
            if lo > hi:
                return ScalarField(box, out)
            src.append(slice(lo - a, hi - a + 1))
            dst.append(slice(lo - c, hi - c + 1))
        out[tuple(dst)] = self.values[tuple(src)]
        return ScalarField(box, out)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2)))

    def conj(self) -> "ScalarField":
        return ScalarField(self.box, np.conj(self.values))

    def map(self, func) -> "ScalarField":
        return ScalarField(self.box, func(self.values))

    def _binary(self, other, op) -> "ScalarField":
        if isinstance(other, ScalarField):
            box = self.box if other.box == self.box else self.box.union(other.box)
            return ScalarField(box, op(self.on(box).values, other.on(box).values))
        return ScalarField(self.box, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, ScalarField):
            raise TypeError("division by a field is not defined (zero extension)")
        return ScalarField(self.box, self.values / other)

    def __neg__(self):
        return ScalarField(self.box, -self.values)

    def __repr__(self):
        return f"ScalarField(box={self.box!r}, dtype={self.values.dtype})"

    # -- serialization ------------------------------------------------------
    def to_csv(self, path) -> None:
        """One row per node: integer index tuple then value."""
        idx = self.box.index_grid().reshape(self.box.d, -1).T
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"k{j}" for j in range(self.box.d)] + ["value"])
            for k, v in zip(idx, self.flat):
                w.writerow(list(map(int, k)) + [repr(complex(v)) if self.is_complex else repr(float(v))])

    @classmethod
    def from_csv(cls, path, box: LatticeBox) -> "ScalarField":
        vals = np.zeros(box.shape, dtype=complex)
        is_complex = False
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            next(rows)
            for row in rows:
                idx = tuple(int(k) for k in row[: box.d])
                v = complex(row[box.d].strip("()"))
                is_complex |= v.imag != 0 or "j" in row[box.d]
                vals[tuple(k - a for k, a in zip(idx, box.lo))] = v
        return cls(box, vals if is_complex else vals.real)

    def to_npy(self, path) -> None:
        """Binary values plus a ``.json`` sidecar holding the box."""
        path = Path(path)
        np.save(path, self.values)
        path.with_suffix(".json").write_text(json.dumps(self.box.to_dict()))

    @classmethod
    def from_npy(cls, path) -> "ScalarField":
        path = Path(path)
        box = LatticeBox.from_dict(json.loads(path.with_suffix(".json").read_text()))
        return cls(box, np.load(path if path.suffix == ".npy" else path.with_suffix(".npy")))


# -- difference calculus ----------------------------------------------------

def _check_axis(u: ScalarField, axis: int) -> None:
    if not (0 <= axis < u.box.d):
        raise LatticeDomainError(f"axis {axis} out of range for d={u.box.d}")


def _neighbours(u: ScalarField, axis: int):
    """(u(x), u(x+h e_axis), u(x-h e_axis)) read on the box grown by one layer."""
    _check_axis(u, axis)
    padded = np.pad(u.values, 2)
    centre = [slice(1, -1)] * u.box.d
    plus, minus = list(centre), list(centre)
    plus[axis] = slice(2, None)
    minus[axis] = slice(0, -2)
    return padded[tuple(centre)], padded[tuple(plus)], padded[tuple(minus)]


def forward_diff(u: ScalarField, axis: int) -> ScalarField:
    """D+ u(x) = (u(x + h e_axis) - u(x)) / h."""
    c, p, _ = _neighbours(u, axis)
    return ScalarField(u.box.grow(1), (p - c) / u.box.h)


def backward_diff(u: ScalarField, axis: int) -> ScalarField:
    """D- u(x) = (u(x) - u(x - h e_axis)) / h."""
    c, _, m = _neighbours(u, axis)
    return ScalarField(u.box.grow(1), (c - m) / u.box.h)


def mean_op(u: ScalarField, axis: int, sign: int = +1) -> ScalarField:
    """M+- u(x) = (u(x +- h e_axis) + u(x)) / 2."""
    c, p, m = _neighbours(u, axis)
    if sign not in (1, -1):
        raise LatticeDomainError("sign must be +1 or -1")
    return ScalarField(u.box.grow(1), ((p if sign > 0 else m) + c) / 2)


def central_diff(u: ScalarField, axis: int) -> ScalarField:
    _, p, m = _neighbours(u, axis)
    return ScalarField(u.box.grow(1), (p - m) / (2 * u.box.h))


def laplacian(u: ScalarField) -> ScalarField:
    """Full-lattice Delta_h u of the zero extension, computed as sum_j D-_j D+_j u.

    The result is supported on ``u.box.grow(2)``; ``laplacian(u).on(u.box)``
    is the Dirichlet Laplacian on the box.
    """
    out = None
    for j in range(u.box.d):
        term = backward_diff(forward_diff(u, j), j)
        out = term if out is None else out + term
    return out


def inner_product(u: ScalarField, v: ScalarField):
    """sum_x u(x) conj(v(x)) over the lattice (no h^d weight)."""
    box = u.box.union(v.box)
    return np.sum(u.on(box).values * np.conj(v.on(box).values))


class SBPResult(NamedTuple):
    residual: float
    touches_boundary: bool


def _touches_boundary(u: ScalarField) -> bool:
    vals = u.values
    for j in range(u.box.d):
        first = np.take(vals, 0, axis=j)
        last = np.take(vals, -1, axis=j)
        if np.any(first != 0) or np.any(last != 0):
            return True
    return False


def sbp_residual(u: ScalarField, v: ScalarField, axis: int) -> SBPResult:
    """sum_{x in Q} v D+u + sum_{x in Q} u D-v over the common box Q.

    Vanishes when u and v are zero on the outer layer of Q; otherwise the
    residual is still returned and ``touches_boundary`` is set.
    """
    box = u.box.union(v.box)
    u, v = u.on(box), v.on(box)
    r = np.sum(v.values * forward_diff(u, axis).on(box).values) + np.sum(
        u.values * backward_diff(v, axis).on(box).values
    )
    return SBPResult(r.item(), _touches_boundary(u) or _touches_boundary(v))


def dirichlet_laplacian_matrix(box: LatticeBox) -> sparse.csr_matrix:
    """Sparse matrix of the Dirichlet Laplacian on the box, C-order unknowns."""
    mats = []
    for j, n in enumerate(box.shape):
        e = np.ones(n)
        t = sparse.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1]) / box.h**2
        parts = [sparse.identity(m, format="csr") for m in box.shape]
        parts[j] = t
        term = parts[0]
        for p in parts[1:]:
            term = sparse.kron(term, p)
        mats.append(term)
    return sparse.csr_matrix(sum(mats))
