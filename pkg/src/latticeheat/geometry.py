"""Observation sets on the lattice: equidistributed unions of cubes, thickness scans, punctures."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .lattice import LatticeBox, LatticeDomainError, ScalarField

_EPS = 1e-9


@dataclass(frozen=True)
class ObservationMask:
    """Indicator of omega on the nodes of a box, with construction metadata."""

    box: LatticeBox
    indicator: np.ndarray
    L: Optional[float] = None
    gamma: Optional[float] = None
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ind = np.array(self.indicator, dtype=bool).reshape(self.box.shape)
        ind.flags.writeable = False
        object.__setattr__(self, "indicator", ind)

    @classmethod
    def full(cls, box: LatticeBox) -> "ObservationMask":
        return cls(box, np.ones(box.shape, dtype=bool), kind="full")

    @classmethod
    def empty(cls, box: LatticeBox) -> "ObservationMask":
        return cls(box, np.zeros(box.shape, dtype=bool), kind="empty")

    @property
    def count(self) -> int:
        return int(self.indicator.sum())

    @property
    def flat(self) -> np.ndarray:
        return self.indicator.reshape(-1)

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    def as_field(self) -> ScalarField:
        return ScalarField(self.box, self.indicator.astype(float))

    def apply(self, u: ScalarField) -> ScalarField:
        """1_omega u on the mask's box."""
        u = u.on(self.box)
        return ScalarField(self.box, np.where(self.indicator, u.values, 0))

    def issubset(self, other: "ObservationMask") -> bool:
        return bool(np.all(other.indicator[self.indicator]))

    def union(self, other: "ObservationMask") -> "ObservationMask":
        return ObservationMask(self.box, self.indicator | other.indicator, kind="union")

    def indices(self) -> np.ndarray:
        """Integer node indices of the true nodes, shape (count, d)."""
        grid = self.box.index_grid().reshape(self.box.d, -1).T
        return grid[self.flat]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"k{j}" for j in range(self.box.d)])
            w.writerows(self.indices().tolist())

    def to_bitmap(self, path) -> None:
        np.save(path, self.indicator.astype(np.uint8))


def _cube_side_nodes(length: float, h: float) -> int:
    n = length / h
    if abs(n - round(n)) > 1e-7 * max(1.0, n):
        raise LatticeDomainError(f"length {length:g} is not a multiple of h={h:g}")
    return int(round(n))


OffsetSpec = Union[None, Sequence[float], Callable[[tuple], Sequence[float]]]


def periodic_equidistributed(box: LatticeBox, L: float, gamma: float, offsets: OffsetSpec = None) -> ObservationMask:
    """Union over cells kL + [-L/2, L/2)^d of the sub-cubes z_k + [-gamma L/2, gamma L/2)^d.

    ``z_k = L k + offset_k``.  ``offsets`` is None (all zero), a single
    vector used for every cell, or a callable mapping the integer cell index
    to an offset.  Cubes are half-open so adjacent cells never share nodes;
    a sub-cube holding no node is represented by the node nearest to z_k.
    """
    if not 0 < gamma <= 1:
        raise LatticeDomainError("gamma must lie in (0, 1]")
    h, d = box.h, box.d
    _cube_side_nodes(L / 2, h)
    x = box.coords()
    cell = np.floor((x + L / 2) / L + _EPS).astype(int)
    if offsets is None:
        off_fn = lambda k: np.zeros(d)  # noqa: E731
    elif callable(offsets):
        off_fn = lambda k: np.asarray(offsets(k), dtype=float).reshape(d)  # noqa: E731
    else:
        fixed = np.broadcast_to(np.asarray(offsets, dtype=float), (d,))
        off_fn = lambda k: fixed  # noqa: E731

    flat_cells = cell.reshape(d, -1).T
    uniq, inverse = np.unique(flat_cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    limit = (1 - gamma) * L / 2 + _EPS * L
    centres = np.empty((len(uniq), d))
    for i, k in enumerate(uniq):
        off = off_fn(tuple(int(c) for c in k))
        if np.any(np.abs(off) > limit):
            raise LatticeDomainError(f"offset {off.tolist()} pushes the sub-cube out of cell {k.tolist()}")
        centres[i] = L * k + off
    pts = x.reshape(d, -1).T
    rel = pts - centres[inverse]
    half = gamma * L / 2
    tol = _EPS * h
    inside = np.all((rel >= -half - tol) & (rel < half - tol), axis=1)

    # guarantee a representative node for sub-cubes thinner than the mesh
    hit = np.zeros(len(uniq), dtype=bool)
    hit[np.unique(inverse[inside])] = True
    for i in np.flatnonzero(~hit):
        k_near = np.round(centres[i] / h).astype(int)
        if box.contains_index(k_near):
            inside[np.ravel_multi_index(tuple(k_near - np.array(box.lo)), box.shape)] = True
    return ObservationMask(box, inside.reshape(box.shape), L=L, gamma=gamma, kind="equidistributed",
                           meta={"offsets": "custom" if callable(offsets) else offsets})


@dataclass
class ThicknessReport:
    gamma_min: float
    worst_center: Optional[tuple]
    scale: float
    cube_nodes: int


def _window_sums(a: np.ndarray, n: int) -> np.ndarray:
    """Sums of a over every axis-aligned window with n nodes per side."""
    s = a.astype(np.int64)
    for ax in range(a.ndim):
        c = np.cumsum(s, axis=ax)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), c], axis=ax)
        hi = np.take(c, np.arange(n, c.shape[ax]), axis=ax)
        lo = np.take(c, np.arange(0, c.shape[ax] - n), axis=ax)
        s = hi - lo
    return s


def thickness_report(mask: ObservationMask, scale: float) -> ThicknessReport:
    """Minimum fraction of omega-nodes over the cubes x + [-scale/2, scale/2)^d inside the box.

    Centres x range over lattice nodes such that the cube lies in the box;
    each cube holds (scale/h)^d nodes.
    """
    box = mask.box
    n = _cube_side_nodes(scale, box.h)
    if n < 1 or any(n > s for s in box.shape):
        raise LatticeDomainError("scale must be between h and the box width")
    sums = _window_sums(mask.indicator, n)
    frac = sums / float(n**box.d)
    k = np.unravel_index(int(np.argmin(frac)), frac.shape)
    start = np.array(box.lo) + np.array(k)
    # the window starting at index `start` is the cube centred at start + n/2
    centre = tuple(float((s + n / 2) * box.h) for s in start)
    return ThicknessReport(float(frac[k]), centre, float(scale), n**box.d)


def punctured_mask(mask: ObservationMask, center: Sequence[float], radius: float) -> ObservationMask:
    """Remove the nodes with |x - center|_inf < radius (radius 0 leaves the mask as is)."""
    box = mask.box
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * box.d)
    dist = np.max(np.abs(box.coords() - c), axis=0)
    hole = dist < radius - _EPS * box.h
    meta = dict(mask.meta, puncture_center=[float(v) for v in np.ravel(center)], puncture_radius=float(radius))
    return ObservationMask(box, mask.indicator & ~hole, L=mask.L, gamma=mask.gamma, kind=mask.kind, meta=meta)


def mask_from_config(box: LatticeBox, data: dict) -> ObservationMask:
    """Build a mask from ``{"kind": "full" | "equidistributed" | "empty", ...}``."""
    kind = data.get("kind", "equidistributed")
    if kind == "full":
        mask = ObservationMask.full(box)
    elif kind == "empty":
        mask = ObservationMask.empty(box)
    elif kind == "equidistributed":
        mask = periodic_equidistributed(box, float(data["L"]), float(data["gamma"]), data.get("offset"))
    else:
        raise LatticeDomainError(f"unknown mask kind {kind!r}")
    if data.get("puncture_radius"):
        centre = data.get("puncture_center", [0.0] * box.d)
        mask = punctured_mask(mask, centre, float(data["puncture_radius"]))
    return mask


def cube_count(d: int, h: float, half_width: float, open_: bool = True) -> int:
    """Number of nodes of h Z^d in the cube |x|_inf < half_width (or <=)."""
    n = half_width / h
    per_axis = 2 * math.ceil(n - _EPS) - 1 if open_ else 2 * math.floor(n + _EPS) + 1
    return max(per_axis, 0) ** d
