"""
Liouvillian superoperators in the column-stacking convention.

A density matrix ``rho`` is stored as ``vec(rho) = rho.flatten(order='F')``
so that ``vec(A rho B) = (B^T kron A) vec(rho)``.  With this convention

    L = -i (I kron H - H^T kron I)
        + sum_mu kappa_mu [conj(J) kron J - 1/2 I kron (J^H J) - 1/2 (J^H J)^T kron I]
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, NonTracePreservingDirection
from .tensor_core import DTYPE, LUFactorization, as_sparse, lu_factor

__all__ = [
    'LindbladModel', 'DensityVector', 'ParameterizedLiouvillian',
    'TraceModifiedSystem', 'build_liouvillian', 'trace_modify',
    'steady_state_lu', 'parameterize', 'expectation', 'identity_vector',
    'vec', 'unvec', 'dissipator',
]

HERMITICITY_TOL = 1e-12


def vec(rho):
    return np.asarray(rho, dtype=DTYPE).flatten(order='F')


def unvec(v, dim=None):
    v = np.asarray(v)
    if dim is None:
        dim = int(round(np.sqrt(v.shape[0])))
    if dim * dim != v.shape[0]:
        raise DimensionMismatch(f'vector of length {v.shape[0]} is not a vectorized square matrix')
    return v.reshape((dim, dim), order='F')


def identity_vector(dim):
    """``vec(I)``; the left zero eigenvector of every Liouvillian."""
    v = np.zeros(dim * dim, dtype=DTYPE)
    v[::dim + 1] = 1.0
    return v


@dataclass(frozen=True)
class LindbladModel:
    """Hamiltonian plus weighted jump operators on one Hilbert space.

    ``rates`` must be non-negative for a physical model; direction models
    (parameter derivatives) are built with ``check_rates=False``.
    """
    hamiltonian: sp.spmatrix
    jumps: tuple = ()
    check_rates: bool = True

    def __post_init__(self):
        H = as_sparse(self.hamiltonian)
        object.__setattr__(self, 'hamiltonian', H)
        d = H.shape[0]
        if H.shape != (d, d):
            raise DimensionMismatch(f'Hamiltonian must be square, got {H.shape}')
        herm = abs(H - H.getH())
        if herm.nnz and herm.max() > HERMITICITY_TOL:
            raise ValueError('Hamiltonian is not Hermitian')
        jumps = []
        for op, rate in self.jumps:
            J = as_sparse(op)
            if J.shape != (d, d):
                raise DimensionMismatch(
                    f'jump operator shape {J.shape} does not match Hilbert dimension {d}')
            rate = float(rate)
            if self.check_rates and rate < 0:
                raise ValueError(f'negative rate {rate}')
            jumps.append((J, rate))
        object.__setattr__(self, 'jumps', tuple(jumps))

    @property
    def hilbert_dim(self):
        return self.hamiltonian.shape[0]


@dataclass(frozen=True)
class DensityVector:
    """Vectorized density matrix (or perturbative correction).

    ``kind`` is ``'physical'`` for unit-trace states, ``'traceless'`` for
    corrections and derivatives, ``'raw'`` otherwise.
    """
    data: np.ndarray
    hilbert_dim: int
    kind: str = 'physical'

    def matrix(self):
        return unvec(self.data, self.hilbert_dim)

    def trace(self):
        return complex(self.data[::self.hilbert_dim + 1].sum())

    def hermiticity_error(self):
        R = self.matrix()
        return float(np.max(np.abs(R - R.conj().T)))

    def min_eigenvalue(self):
        R = self.matrix()
        return float(np.linalg.eigvalsh(0.5 * (R + R.conj().T)).min())

    def trace_norm_distance(self, other):
        D = self.matrix() - (other.matrix() if isinstance(other, DensityVector)
                             else unvec(other, self.hilbert_dim))
        return float(np.linalg.svd(D, compute_uv=False).sum())


def dissipator(J, rate=1.0):
    """Superoperator of ``rate * D[J]``."""
    J = as_sparse(J)
    d = J.shape[0]
    eye = sp.identity(d, dtype=DTYPE, format='csr')
    JdJ = (J.getH() @ J).tocsr()
    out = (sp.kron(J.conj(), J) - 0.5 * sp.kron(eye, JdJ) - 0.5 * sp.kron(JdJ.T, eye))
    return (rate * out).tocsr()


def hamiltonian_superoperator(H):
    H = as_sparse(H)
    eye = sp.identity(H.shape[0], dtype=DTYPE, format='csr')
    return (-1j * (sp.kron(eye, H) - sp.kron(H.T, eye))).tocsr()


def build_liouvillian(model):
    """Matrix of ``rho -> -i[H, rho] + sum kappa D[J] rho``."""
    L = hamiltonian_superoperator(model.hamiltonian)
    for J, rate in model.jumps:
        if rate != 0.0:
            L = L + dissipator(J, rate)
    L = as_sparse(L)
    L.eliminate_zeros()
    return L


@dataclass(frozen=True)
class TraceModifiedSystem:
    """``(L + b |e_pin><trace|) x = b e_pin``; the solution has unit trace.

    ``trace_vector`` defaults to ``vec(I)``; symmetry-reduced systems pass the
    identity expressed in their own basis.
    """
    matrix: sp.spmatrix
    rhs: np.ndarray
    b: complex
    liouvillian: sp.spmatrix
    trace_vector: np.ndarray
    hilbert_dim: Optional[int] = None


def trace_modify(L, b=1.0, trace_vector=None, pin=0, hilbert_dim=None):
    L = as_sparse(L)
    n = L.shape[0]
    if L.shape != (n, n):
        raise DimensionMismatch(f'Liouvillian must be square, got {L.shape}')
    if trace_vector is None:
        d = int(round(np.sqrt(n)))
        if d * d != n:
            raise DimensionMismatch(f'dimension {n} is not a square; pass trace_vector')
        trace_vector = identity_vector(d)
        hilbert_dim = d
    trace_vector = np.asarray(trace_vector, dtype=DTYPE)
    if not 0 <= pin < n:
        raise DimensionMismatch(f'pin {pin} outside 0..{n - 1}')
    # e_pin must lie outside range(L) = {y : <trace|y> = 0}, else L~ is singular
    if abs(trace_vector[pin]) == 0:
        raise ValueError(f'pin {pin} has no overlap with the trace vector (use a diagonal entry)')
    cols = np.flatnonzero(trace_vector)
    T = sp.csr_matrix((trace_vector[cols].conj(), (np.full(len(cols), pin), cols)),
                      shape=(n, n))
    rhs = np.zeros(n, dtype=DTYPE)
    rhs[pin] = b
    return TraceModifiedSystem(as_sparse(L + b * T), rhs, complex(b), L,
                               trace_vector, hilbert_dim)


def steady_state_lu(system, **lu_options):
    """Steady state of a trace-modified system and its reusable factorization.

    Raises ``SingularMatrix`` when the kernel is not one-dimensional.
    """
    F = lu_factor(system.matrix, **lu_options)
    x = F.solve(system.rhs)
    x = x / np.vdot(system.trace_vector, x)
    dim = system.hilbert_dim or int(round(np.sqrt(x.shape[0])))
    return DensityVector(x, dim, 'physical'), F


@dataclass(frozen=True)
class ParameterizedLiouvillian:
    """``L(eps) = L0 + sum_j eps_j L_j`` around ``base_point``."""
    base: sp.spmatrix
    directions: tuple
    base_point: np.ndarray = field(default_factory=lambda: np.zeros(0))
    names: tuple = ()
    trace_vector: Optional[np.ndarray] = None
    hilbert_dim: Optional[int] = None

    def __post_init__(self):
        n = self.base.shape[0]
        for Lj in self.directions:
            if Lj.shape != (n, n):
                raise DimensionMismatch('all directions must share the base dimension')
        if self.trace_vector is None:
            d = int(round(np.sqrt(n)))
            object.__setattr__(self, 'trace_vector', identity_vector(d))
            object.__setattr__(self, 'hilbert_dim', d)
        object.__setattr__(self, 'base_point', np.asarray(self.base_point, dtype=float))

    @property
    def dim(self):
        return self.base.shape[0]

    @property
    def n_directions(self):
        return len(self.directions)

    def at(self, eps):
        eps = np.atleast_1d(np.asarray(eps, dtype=float))
        L = self.base.copy()
        for e, Lj in zip(eps, self.directions):
            if e != 0.0:
                L = L + e * Lj
        return as_sparse(L)

    def matvec(self, eps, x):
        eps = np.atleast_1d(np.asarray(eps, dtype=float))
        y = self.base @ x
        for e, Lj in zip(eps, self.directions):
            if e != 0.0:
                y = y + e * (Lj @ x)
        return y

    def trace_modified(self, b=1.0):
        return trace_modify(self.base, b, self.trace_vector, hilbert_dim=self.hilbert_dim)


def _trace_leak(L, trace_vector):
    return float(np.max(np.abs(L.T @ trace_vector.conj()), initial=0.0))


def parameterize(base, directions, base_point=None, names=(), trace_tol=1e-10):
    """Assemble ``L0 + sum eps_j L_j`` from a base model and direction models.

    Directions may be ``LindbladModel`` deltas (Hamiltonian/rate derivatives)
    or prebuilt superoperator matrices; each must annihilate the trace.
    """
    L0 = base if sp.issparse(base) else build_liouvillian(base)
    L0 = as_sparse(L0)
    d = int(round(np.sqrt(L0.shape[0])))
    one = identity_vector(d)
    mats = []
    for k, D in enumerate(directions):
        Lj = as_sparse(D) if sp.issparse(D) else build_liouvillian(D)
        if Lj.shape != L0.shape:
            raise DimensionMismatch(f'direction {k} has shape {Lj.shape}, base {L0.shape}')
        leak = _trace_leak(Lj, one)
        if leak > trace_tol:
            raise NonTracePreservingDirection(
                f'direction {k} does not preserve the trace (|<1|L_j| = {leak:.3e})')
        mats.append(Lj)
    if base_point is None:
        base_point = np.zeros(len(mats))
    return ParameterizedLiouvillian(L0, tuple(mats), np.asarray(base_point, float),
                                    tuple(names), one, d)


def expectation(rho, O):
    """``Tr(O rho)``."""
    O = as_sparse(O)
    if O.shape != (rho.hilbert_dim, rho.hilbert_dim):
        raise DimensionMismatch(
            f'operator shape {O.shape} does not match Hilbert dimension {rho.hilbert_dim}')
    # Tr(O rho) = sum_ij O_ij rho_ji = vec(O^T) . vec(rho)
    return complex(vec_of_transpose(O) @ rho.data)


def vec_of_transpose(O):
    """``vec(O^T)`` as a dense vector, so ``Tr(O rho) = vec(O^T) @ vec(rho)``."""
    O = as_sparse(O)
    d = O.shape[0]
    coo = O.tocoo()
    out = np.zeros(d * d, dtype=DTYPE)
    # (O^T)_{ji} = O_ij sits at column-major position j + i*d
    np.add.at(out, coo.col + coo.row * d, coo.data)
    return out
