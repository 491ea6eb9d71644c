"""Potentials V on R^d, their lattice restrictions and box norms.

Evaluators take points of shape ``(n, d)`` and return arrays of shape ``(n,)``.
Gradients return shape ``(n, d)``.  All norms are maxima over the nodes of the
supplied box, used as a surrogate for the supremum over R^d.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lattice import LatticeBox, ScalarField

KINDS = ("bounded_continuous", "bounded_C1", "power_growth")

Evaluator = Callable[[np.ndarray], np.ndarray]


class CapabilityError(RuntimeError):
    """The potential lacks an evaluator that the requested quantity needs."""


class PotentialError(ValueError):
    pass


@dataclass(frozen=True)
class PowerGrowth:
    """Envelope data for potentials growing like a power of |x|.

    The split ``V = v1 + v2`` has ``v1`` differentiable; ``v1_grad`` is its
    gradient.  The envelope reads

        V(x) >= c0 |x|^beta1,
        c1 |x|^beta1 <= |D v1| + |v1| + |v2|^(4/3) <= c2 |x|^beta2.
    """

    beta1: float
    beta2: float
    c0: float
    c1: float
    c2: float
    v1: Evaluator
    v1_grad: Evaluator
    v2: Evaluator

    def __post_init__(self):
        if not 0 < self.beta1 <= self.beta2:
            raise PotentialError("need 0 < beta1 <= beta2")


@dataclass(frozen=True)
class PotentialSpec:
    kind: str
    func: Evaluator
    grad: Optional[Evaluator] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    growth: Optional[PowerGrowth] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PotentialError(f"unknown potential kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "bounded_C1" and self.grad is None:
            raise PotentialError("bounded_C1 potentials need a gradient evaluator")
        if self.kind == "power_growth" and self.growth is None:
            raise PotentialError("power_growth potentials need envelope data")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.broadcast_to(np.asarray(self.func(points), dtype=float), (points.shape[0],))

    @property
    def is_bounded(self) -> bool:
        return self.kind != "power_growth"


# -- factories --------------------------------------------------------------

def zero() -> PotentialSpec:
    return constant(0.0, name="zero")


def constant(c: float, name: str = "constant") -> PotentialSpec:
    c = float(c)
    return PotentialSpec(
        "bounded_C1",
        lambda x: np.full(x.shape[0], c),
        grad=lambda x: np.zeros_like(x, dtype=float),
        name=name,
        params={"c": c},
    )


def sine(amplitude: float = 1.0, frequency: float = 1.0, shift: float = 0.0) -> PotentialSpec:
    """V(x) = shift + amplitude * mean_j sin(frequency * x_j)."""
    a, w, s = float(amplitude), float(frequency), float(shift)

    def func(x):
        return s + a * np.mean(np.sin(w * x), axis=1)

    def grad(x):
        return a * w * np.cos(w * x) / x.shape[1]

    return PotentialSpec("bounded_C1", func, grad=grad, name="sine",
                         params={"amplitude": a, "frequency": w, "shift": s})


def power(beta: float, c2: Optional[float] = None, c0: float = 1.0, c1: float = 1.0) -> PotentialSpec:
    """V(x) = |x|^beta with the trivial split V1 = V, V2 = 0.

    ``|D V1| = beta |x|^(beta-1)``, so for beta >= 1 and |x| >= 1 the upper
    envelope holds with c2 = 1 + beta (the default).
    """
    beta = float(beta)
    if beta <= 0:
        raise PotentialError("beta must be positive")
    c2 = 1.0 + beta if c2 is None else float(c2)

    def func(x):
        return np.linalg.norm(x, axis=1) ** beta

    def grad(x):
        r = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = beta * r[:, None] ** (beta - 2) * x
        return np.where(r[:, None] > 0, g, 0.0)

    growth = PowerGrowth(beta, beta, c0, c1, c2, v1=func, v1_grad=grad, v2=lambda x: np.zeros(x.shape[0]))
    return PotentialSpec("power_growth", func, grad=grad, name="power",
                         params={"beta": beta, "c0": c0, "c1": c1, "c2": c2}, growth=growth)


def tabulated(field_: ScalarField, name: str = "tabulated") -> PotentialSpec:
    """Potential given by node values; zero off the table, no gradient."""
    box = field_.box

    def func(x):
        out = np.zeros(x.shape[0])
        for n, p in enumerate(x):
            out[n] = float(np.real(field_.at(box.index_of(p))))
        return out

    return PotentialSpec("bounded_continuous", func, name=name)


def from_config(data: dict) -> PotentialSpec:
    """Build a potential from ``{"name": ..., **params}``."""
    data = dict(data)
    name = data.pop("name", "zero")
    if name == "zero":
        return zero()
    if name == "constant":
        return constant(data.get("c", 1.0))
    if name == "sine":
        return sine(**data)
    if name == "power":
        return power(**data)
    if name == "tabulated":
        return tabulated(ScalarField.from_npy(data["path"]))
    raise PotentialError(f"unknown potential name {name!r}")


# -- lattice quantities -------------------------------------------------------

def restrict(spec: PotentialSpec | Evaluator, box: LatticeBox) -> ScalarField:
    """Samples V(hk) on the nodes of the box."""
    func = spec if not isinstance(spec, PotentialSpec) else spec.__call__
    pts = box.points()
    return ScalarField(box, np.broadcast_to(np.asarray(func(pts), dtype=float), (pts.shape[0],)))


def sup_norms(spec: PotentialSpec, box: LatticeBox, w1: bool = True) -> dict:
    """``{"Linf": max|V|, "W1inf": max|V| + max|grad V|}`` over the box nodes."""
    pts = box.points()
    linf = float(np.max(np.abs(spec(pts))))
    out = {"Linf": linf}
    if w1:
        if spec.grad is None:
            raise CapabilityError(f"potential {spec.name!r} has no gradient; W1inf unavailable")
        g = np.asarray(spec.grad(pts), dtype=float).reshape(pts.shape)
        out["W1inf"] = linf + float(np.max(np.linalg.norm(g, axis=1)))
    return out


@dataclass
class AssumptionReport:
    holds: bool
    worst_node: Optional[tuple]
    margins: dict

    def __bool__(self):
        return self.holds


def assumption_a_check(spec: PotentialSpec, box: LatticeBox, exclude_radius: float = 0.0) -> AssumptionReport:
    """Check the three power-growth envelope inequalities at every node.

    Nodes with |x| <= exclude_radius are skipped, and the origin always is.
    Margins are the minimum over nodes of (larger side - smaller side)
    normalised by max(1, |x|^beta); ``worst_node`` is the coordinate where the
    most negative margin occurs (``None`` when all hold).
    """
    if spec.kind != "power_growth":
        raise CapabilityError("assumption check needs a power_growth potential")
    g = spec.growth
    pts = box.points()
    r = np.linalg.norm(pts, axis=1)
    keep = r > max(exclude_radius, 0.0)
    pts, r = pts[keep], r[keep]
    if pts.size == 0:
        return AssumptionReport(True, None, {})
    v = spec(pts)
    mid = (np.linalg.norm(np.asarray(g.v1_grad(pts), dtype=float).reshape(pts.shape), axis=1)
           + np.abs(g.v1(pts)) + np.abs(g.v2(pts)) ** (4.0 / 3.0))
    low1, low2, up2 = r**g.beta1, r**g.beta1, r**g.beta2
    scale1 = np.maximum(1.0, low1)
    scale2 = np.maximum(1.0, up2)
    margins = {
        "lower_V": (v - g.c0 * low1) / scale1,
        "lower_mid": (mid - g.c1 * low2) / scale1,
        "upper_mid": (g.c2 * up2 - mid) / scale2,
    }
    tol = 1e-12
    worst_val, worst_at = 0.0, None
    for m in margins.values():
        k = int(np.argmin(m))
        if m[k] < -tol and m[k] < worst_val:
            worst_val, worst_at = float(m[k]), tuple(float(c) for c in pts[k])
    return AssumptionReport(worst_at is None, worst_at, {k: float(np.min(m)) for k, m in margins.items()})
