"""Independent reference implementations used to freeze expected values.

Nothing here imports the package; each routine follows a different numerical
route from the production code.
"""
import math

import numpy as np


def log_bessel_kernel(tau: float, u: int) -> float:
    """log(exp(-2 tau) I_|u|(2 tau)) by normalised downward (Miller) recursion.

    I_{k-1}(x) = I_{k+1}(x) + (2k/x) I_k(x) is run downward from a start
    index far above |u|, renormalising every step and keeping the
    accumulated scale as a logarithm.  The sequence is normalised with
    I_0 + 2 sum_{k>=1} I_k = e^x, which folds in the e^{-x} factor.  For
    x below 1e-100 the leading series term (x/2)^u / u! is exact to
    relative order x^2 and is used directly.
    """
    u = abs(int(u))
    if tau == 0:
        return 0.0 if u == 0 else -math.inf
    x = 2.0 * tau
    if x < 1e-100:
        return u * math.log(x / 2) - math.lgamma(u + 1) - x
    start = int(max(u, x) + 60 + 12 * math.sqrt(max(u, x)))
    start += start % 2
    i_next, i_cur = 0.0, 1.0  # I_{k+1}, I_k on the current scale
    log_scale = 0.0           # true value = stored value * exp(log_scale)
    total = 0.0               # sum_{m > k} I_m on the current scale
    log_target = -math.inf
    for k in range(start, 0, -1):
        i_prev = i_next + (2.0 * k / x) * i_cur
        total += i_cur
        i_next, i_cur = i_cur, i_prev
        if k - 1 == u:
            log_target = math.log(i_cur) + log_scale
        # renormalise so that i_cur == 1
        c = i_cur
        i_next /= c
        total /= c
        i_cur = 1.0
        log_scale += math.log(c)
    # now i_cur = I_0 and total = sum_{k>=1} I_k, both on the scale exp(log_scale)
    log_norm = math.log(i_cur + 2.0 * total) + log_scale
    return log_target - log_norm


def bessel_kernel(tau: float, u: int) -> float:
    """exp(-2 tau) I_|u|(2 tau), see ``log_bessel_kernel``."""
    return math.exp(log_bessel_kernel(tau, u))


def path_graph_eigenvalues(n: int, h: float) -> np.ndarray:
    k = np.arange(1, n + 1)
    return 4.0 / h**2 * np.sin(k * np.pi / (2 * (n + 1))) ** 2


def zeta_mpmath_free(s: float) -> float:
    """zeta via the logarithmic form, evaluated with math.fsum guards."""
    r = math.hypot(s, 1.0)
    return math.log(s + r) - s / (1.0 + r)


def path_graph_sine_basis(n: int) -> np.ndarray:
    """Orthonormal Dirichlet eigenvectors of the n-node path graph, ascending eigenvalue."""
    j = np.arange(1, n + 1)[:, None]
    k = np.arange(1, n + 1)[None, :]
    return np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * j * k / (n + 1))


def sharp_observability_pencil(phi: np.ndarray, mask: np.ndarray) -> float:
    """max ||u||^2 / ||1_omega u||^2 over span(phi): top eigenvalue of the pencil (A, B)."""
    from scipy.linalg import eigh

    a = phi.T @ phi
    b = phi[mask].T @ phi[mask]
    return float(eigh(a, b, eigvals_only=True)[-1])
