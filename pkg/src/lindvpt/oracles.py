"""
Dense brute-force oracles for tests and acceptance runs.

None of these reuse the sparse LU, recursion or Galerkin code paths; they
work from dense eigen/singular value decompositions so that they can check
those paths independently.  Every entry point refuses dimensions above
``MAX_DIM``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateKernel, OracleTooLarge
from .lindblad import DensityVector

__all__ = [
    'MAX_DIM', 'DenseOracleResult', 'dense_steady_state',
    'dense_pseudo_inverse_apply', 'dense_least_squares_vpt',
    'finite_difference_gradient',
]

# Liouvillian dimension cap (a 5000 x 5000 complex matrix is 400 MB)
MAX_DIM = 5000


@dataclass(frozen=True)
class DenseOracleResult:
    value: object
    method: str
    condition: float


def _dense(L):
    A = L.toarray() if hasattr(L, 'toarray') else np.asarray(L)
    if A.shape[0] > MAX_DIM:
        raise OracleTooLarge(f'dimension {A.shape[0]} exceeds the oracle cap {MAX_DIM}')
    return A.astype(complex)


def dense_steady_state(L, kernel_tol=1e-9, trace_vector=None):
    """Kernel vector of ``L`` from a dense SVD, normalized to unit trace.

    Raises
    ------
    DegenerateKernel
        If more than one singular value is below ``kernel_tol`` relative to
        the largest.
    """
    A = _dense(L)
    U, s, Vh = scipy.linalg.svd(A)
    small = np.flatnonzero(s <= kernel_tol * s[0])
    if len(small) > 1:
        raise DegenerateKernel(f'{len(small)} singular values below {kernel_tol:g}')
    x = Vh[-1].conj()
    n = A.shape[0]
    d = int(round(np.sqrt(n)))
    if trace_vector is None:
        trace_vector = np.zeros(n, dtype=complex)
        trace_vector[::d + 1] = 1.0
    x = x / np.vdot(trace_vector, x)
    cond = float(s[0] / s[-2]) if n > 1 else 1.0
    return DensityVector(x, d), DenseOracleResult(x, 'dense-svd-kernel', cond)


def dense_pseudo_inverse_apply(L0, v, rcond=1e-10):
    """``L0^+ v`` with the Moore-Penrose pseudo-inverse (dense SVD)."""
    A = _dense(L0)
    return scipy.linalg.pinv(A, rtol=rcond) @ np.asarray(v, dtype=complex)


def dense_least_squares_vpt(L_eps, Q, trace_vector=None, b=1.0):
    """Exact minimizer of ``||L~(eps) Q q - b e_0||`` over ``q``.

    Returns ``(coefficients, unit-trace state, residual ||L(eps) rho||)``.
    The trace-modified matrix is assembled here independently.
    """
    A = _dense(L_eps)
    n = A.shape[0]
    d = int(round(np.sqrt(n)))
    if trace_vector is None:
        trace_vector = np.zeros(n, dtype=complex)
        trace_vector[::d + 1] = 1.0
    At = A.copy()
    At[0, :] += b * trace_vector.conj()
    rhs = np.zeros(n, dtype=complex)
    rhs[0] = b
    Q = np.asarray(Q, dtype=complex)
    q = scipy.linalg.lstsq(At @ Q, rhs)[0]
    x = Q @ q
    x = x / np.vdot(trace_vector, x)
    return q, x, float(np.linalg.norm(A @ x))


def finite_difference_gradient(f, x, steps=(1e-3, 5e-4), rel_check=1e-3):
    """Central differences with a Richardson step check.

    ``f`` maps a real vector to a real or complex scalar (or array).  For
    every coordinate the central difference is evaluated at each step in
    ``steps`` (relative to ``max(1, |x_k|)``); the Richardson combination of
    the two finest steps is returned.  ``consistent`` reports whether the
    plain differences at the two finest steps agree to ``rel_check``.

    Returns
    -------
    (gradient, consistent)
    """
    x = np.asarray(x, dtype=float)
    grads = []
    ok = True
    for k in range(x.size):
        scale = max(1.0, abs(x[k]))
        est = []
        for h in steps:
            e = np.zeros_like(x)
            e[k] = h * scale
            est.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h * scale))
        if len(est) >= 2:
            h1, h2 = steps[-2], steps[-1]
            r = (h1 / h2) ** 2
            g = (r * est[-1] - est[-2]) / (r - 1)
            denom = max(np.max(np.abs(g)), 1e-300)
            if np.max(np.abs(est[-1] - est[-2])) > rel_check * denom:
                ok = False
        else:
            g = est[-1]
        grads.append(g)
    return np.array(grads), ok
