"""Small least-squares helpers shared by the fitting routines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LineFit:
    slope: float
    intercept: float
    residual: float  # root-mean-square residual
    r2: float
    n: int

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x)


def fit_line(x, y) -> LineFit:
    """Ordinary least squares y ~ intercept + slope * x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points for a line fit")
    a = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    r = y - a @ coef
    ss_res = float(r @ r)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return LineFit(float(coef[1]), float(coef[0]), float(np.sqrt(ss_res / x.size)), r2, int(x.size))
