"""
Perturbative correction grids by LU reuse, standard PT evaluation and the
variational (Galerkin) reduction over the span of the corrections.

For ``L(eps) = L0 + sum_j eps_j L_j`` with factorized ``L~0 = L0 + b T`` the
correction at multi-index ``n`` is obtained from

    sigma_n = L~0^{-1} ( - sum_j L_j rho_{n - e_j} )

followed by removal of the component along the base state.  ``sigma_n`` is
traceless by construction because ``<1| L_j = 0``.
"""

from dataclasses import dataclass, field
import itertools
import warnings

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, DivergingSeries, EmptyInput
from .lindblad import DensityVector, ParameterizedLiouvillian
from .tensor_core import DTYPE, orthonormalize, small_dense_solve

__all__ = [
    'CorrectionGrid', 'PerturbationBasis', 'VptSolution', 'multi_indices',
    'pt_corrections_1d', 'pt_corrections_grid', 'standard_pt_eval',
    'build_basis', 'vpt_solve', 'residual_norm', 'pt_coefficients',
    'residual_bound', 'save_basis', 'load_basis',
]

DEDUP_TOL = 1e-12
DIVERGENCE_CAP = 1e12
NORMALIZER_FLOOR = 1e-12
SMOOTH_TOL = 1e-2
CRITICAL_TOL = 1e-7


def multi_indices(orders, traversal='degree'):
    """All multi-indices ``n`` with ``0 <= n_j <= orders[j]``.

    ``traversal`` is ``'C'`` (last index fastest), ``'F'`` (first index
    fastest) or ``'degree'`` (by total degree, then lexicographic).  Every
    traversal visits ``n - e_j`` before ``n``.
    """
    ranges = [range(m + 1) for m in orders]
    if traversal == 'C':
        return list(itertools.product(*ranges))
    if traversal == 'F':
        return [tuple(reversed(i)) for i in itertools.product(*reversed(ranges))]
    if traversal == 'degree':
        return sorted(itertools.product(*ranges), key=lambda i: (sum(i), i))
    raise ValueError(f'unknown traversal {traversal!r}')


@dataclass
class CorrectionGrid:
    """Perturbative corrections around one base point.

    ``gauge='orthogonal'`` removes the base-state component (matches the
    pseudo-inverse recursion); ``gauge='traceless'`` keeps the LU solutions
    as they are, which are the Taylor coefficients of the unit-trace state.
    """
    orders: tuple
    corrections: dict
    base_state: DensityVector
    gauge: str = 'orthogonal'
    sigma_traces: dict = field(default_factory=dict)
    truncated: bool = False
    base_point: np.ndarray = None

    def __len__(self):
        return len(self.corrections)

    def indices(self, traversal='degree'):
        return [i for i in multi_indices(self.orders, traversal) if i in self.corrections]

    def vectors(self, traversal='degree'):
        return [self.corrections[i] for i in self.indices(traversal)]

    def __getitem__(self, index):
        if isinstance(index, int):
            index = (index,)
        return self.corrections[tuple(index)]


def pt_corrections_grid(F, rho0, directions, orders, gauge='orthogonal',
                        traversal='C', trace_vector=None, base_point=None,
                        divergence_cap=DIVERGENCE_CAP):
    """Correction grid for several directions by reusing one factorization.

    Parameters
    ----------
    F : LUFactorization (or anything with ``solve``) of ``L0 + b T``
    rho0 : DensityVector
        Unit-trace base steady state.
    directions : sequence of sparse matrices ``L_j``
    orders : sequence of int
        Maximum order per direction.
    gauge : {'orthogonal', 'traceless'}
    traversal : {'C', 'F', 'degree'}
        Iteration order of the returned corrections; the values do not
        depend on it because every total degree is solved as one block.
    """
    orders = tuple(int(m) for m in orders)
    if len(orders) != len(directions):
        raise DimensionMismatch('one order per direction is required')
    x0 = np.asarray(rho0.data, dtype=DTYPE)
    if trace_vector is None:
        d = rho0.hilbert_dim
        trace_vector = np.zeros(d * d, dtype=DTYPE)
        trace_vector[::d + 1] = 1.0
    unit0 = x0 / np.linalg.norm(x0)
    cap = divergence_cap * np.linalg.norm(x0)
    corr = {(0,) * len(orders): x0.copy()}
    traces = {}
    truncated = False
    if gauge not in ('orthogonal', 'traceless'):
        raise ValueError(f'unknown gauge {gauge!r}')
    # all indices of one total degree depend only on the previous degree,
    # so each degree is one block solve
    by_degree = {}
    for idx in multi_indices(orders, traversal):
        by_degree.setdefault(sum(idx), []).append(idx)
    for deg in range(1, sum(orders) + 1):
        level = by_degree[deg]
        R = np.zeros((x0.shape[0], len(level)), dtype=DTYPE)
        for c, idx in enumerate(level):
            for j, Lj in enumerate(directions):
                if idx[j]:
                    R[:, c] -= Lj @ corr[idx[:j] + (idx[j] - 1,) + idx[j + 1:]]
        S = F.solve(R)
        tr = trace_vector.conj() @ S
        if gauge == 'orthogonal':
            S = S - np.outer(unit0, unit0.conj() @ S)
        else:
            S = S - np.outer(x0, tr)
        for c, idx in enumerate(level):
            traces[idx] = complex(tr[c])
        norms = np.linalg.norm(S, axis=0)
        bad = ~np.isfinite(norms) | (norms > cap)
        if bad.any():
            warnings.warn(f'perturbative series diverges at order {level[int(np.argmax(bad))]}; '
                          'grid truncated', RuntimeWarning, stacklevel=2)
            truncated = True
            break
        for c, idx in enumerate(level):
            corr[idx] = S[:, c]
    corr = {i: corr[i] for i in multi_indices(orders, traversal) if i in corr}
    return CorrectionGrid(orders, corr, rho0, gauge, traces, truncated,
                          None if base_point is None else np.asarray(base_point, float))


def pt_corrections_1d(F, rho0, L1, M, **kwargs):
    return pt_corrections_grid(F, rho0, [L1], [M], **kwargs)


@dataclass
class VptSolution:
    state: DensityVector
    coefficients: np.ndarray
    residual: float
    epsilon: np.ndarray
    converged: bool
    normalizer: complex = 1.0
    rank_deficient: bool = False


def residual_norm(L_eps, rho):
    """``||L(eps) rho||_2`` evaluated with full-space sparse products."""
    x = rho.data if isinstance(rho, DensityVector) else np.asarray(rho)
    y = L_eps(x) if callable(L_eps) else L_eps @ x
    return float(np.linalg.norm(y))


def _residual(liouvillian, eps, x):
    return float(np.linalg.norm(liouvillian.matvec(eps, x)))


def standard_pt_eval(grid, liouvillian, eps, tol=SMOOTH_TOL):
    """Truncated power series ``sum_n eps^n rho_n``, trace-normalized."""
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    x = np.zeros_like(grid.base_state.data)
    coeffs = []
    for idx, v in grid.corrections.items():
        c = np.prod(eps ** np.asarray(idx))
        coeffs.append(c)
        if c != 0.0:
            x = x + c * v
    N = complex(np.vdot(liouvillian.trace_vector, x))
    if abs(N) < NORMALIZER_FLOOR:
        return VptSolution(DensityVector(x, grid.base_state.hilbert_dim, 'raw'),
                           np.array(coeffs), np.inf, eps, False, N)
    x = x / N
    res = _residual(liouvillian, eps, x)
    return VptSolution(DensityVector(x, grid.base_state.hilbert_dim),
                       np.array(coeffs), res, eps, bool(res <= tol), N)


@dataclass(frozen=True)
class PerturbationBasis:
    """Orthonormal basis ``Q`` with cached reduced blocks.

    The reduced trace-modified Liouvillian at ``eps`` is
    ``reduced_base + sum_j eps_j reduced_directions[j]``.
    """
    Q: np.ndarray
    liouvillian: ParameterizedLiouvillian
    reduced_base: np.ndarray
    reduced_directions: tuple
    reduced_rhs: np.ndarray
    trace_row: np.ndarray
    b: complex = 1.0
    sources: tuple = ()
    kept: tuple = ()

    @property
    def size(self):
        return self.Q.shape[1]

    def reduced_matrix(self, eps):
        eps = np.atleast_1d(np.asarray(eps, dtype=float))
        A = self.reduced_base.copy()
        for e, Aj in zip(eps, self.reduced_directions):
            if e != 0.0:
                A += e * Aj
        return A


def build_basis(grids, liouvillian, b=1.0, drop_tol=DEDUP_TOL, extra_vectors=(),
                pin=0):
    """Orthonormalize the union of one or more correction grids.

    Vectors of the first grid come first, each grid ordered by total degree,
    so the first column is the local base state.
    """
    if isinstance(grids, CorrectionGrid):
        grids = [grids]
    vectors = []
    sources = []
    for g in grids:
        vectors.extend(g.vectors('degree'))
        sources.append(None if g.base_point is None else tuple(g.base_point))
    vectors.extend(extra_vectors)
    if not vectors:
        raise EmptyInput('no correction vectors supplied')
    if any(v.shape[0] != liouvillian.dim for v in vectors):
        raise DimensionMismatch('correction vectors do not match the Liouvillian dimension')
    ob = orthonormalize(vectors, drop_tol)
    return basis_from_columns(ob.columns, liouvillian, b, tuple(sources), ob.kept, pin)


def basis_from_columns(Q, liouvillian, b=1.0, sources=(), kept=(), pin=0):
    """Reduced blocks for an already orthonormal ``Q``."""
    Q = np.ascontiguousarray(Q, dtype=DTYPE)
    Qh = Q.conj().T
    trace_row = liouvillian.trace_vector.conj() @ Q
    A0 = Qh @ (liouvillian.base @ Q) + b * np.outer(Qh[:, pin], trace_row)
    dirs = tuple(Qh @ (Lj @ Q) for Lj in liouvillian.directions)
    rhs = b * Qh[:, pin]
    return PerturbationBasis(Q, liouvillian, A0, dirs, rhs, trace_row, complex(b),
                             tuple(sources), tuple(kept))


def vpt_solve(basis, eps, tol=SMOOTH_TOL):
    """Galerkin solution in the span of ``basis`` with a full-space residual.

    The reduced system ``Q^H L~(eps) Q q = Q^H |b>`` is solved, the state
    ``Q q / N`` is normalized by its trace ``N`` and ``||L(eps) rho||`` is
    recomputed in the full space.
    """
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    A = basis.reduced_matrix(eps)
    q, rank_deficient = small_dense_solve(A, basis.reduced_rhs)
    dim = basis.liouvillian.hilbert_dim
    N = complex(basis.trace_row @ q)
    x = basis.Q @ q
    if not np.all(np.isfinite(x)) or abs(N) < NORMALIZER_FLOOR:
        return VptSolution(DensityVector(x, dim, 'raw'), q, np.inf, eps, False, N,
                           rank_deficient)
    x = x / N
    res = _residual(basis.liouvillian, eps, x)
    return VptSolution(DensityVector(x, dim), q, res, eps,
                       bool(res <= tol and not rank_deficient), N, rank_deficient)


def residual_bound(basis, solution):
    """Out-of-span part of the trace-modified residual (diagnostic only)."""
    eps = solution.epsilon
    lt = basis.liouvillian
    x = basis.Q @ solution.coefficients
    r = lt.matvec(eps, x) + basis.b * np.vdot(lt.trace_vector, x) * _unit(lt.dim)
    r[0] -= basis.b
    r -= basis.Q @ (basis.Q.conj().T @ r)
    return float(np.linalg.norm(r) / abs(solution.normalizer))


def _unit(n, k=0):
    e = np.zeros(n, dtype=DTYPE)
    e[k] = 1.0
    return e


def pt_coefficients(grid, state, traversal='degree'):
    """Coefficients ``c_n`` of a state in the raw correction vectors.

    The least-squares problem is solved with unit-norm columns and then
    rescaled; high orders have tiny norms, so only ``c_n ||rho_n||`` is well
    determined.  With unit-trace ``state`` and traceless corrections,
    ``c_0 = 1``.
    """
    idx = grid.indices(traversal)
    V = np.column_stack([grid.corrections[i] for i in idx])
    norms = np.linalg.norm(V, axis=0)
    norms[norms == 0] = 1.0
    x = state.data if isinstance(state, DensityVector) else np.asarray(state)
    c = np.linalg.lstsq(V / norms, x, rcond=None)[0] / norms
    return dict(zip(idx, c))


def save_basis(path, basis, grids=()):
    """Write a basis, its reduced blocks and the source Liouvillian to ``.npz``."""
    lt = basis.liouvillian
    payload = {
        'Q': basis.Q, 'reduced_base': basis.reduced_base,
        'reduced_directions': np.array(basis.reduced_directions),
        'reduced_rhs': basis.reduced_rhs, 'trace_row': basis.trace_row,
        'b': np.array(basis.b), 'base_point': lt.base_point,
        'names': np.array(lt.names, dtype=str), 'trace_vector': lt.trace_vector,
        'hilbert_dim': np.array(lt.hilbert_dim or 0),
        'n_directions': np.array(lt.n_directions),
        'orders': np.array([g.orders for g in grids]) if grids else np.zeros((0, 0)),
    }
    for k, M in enumerate((lt.base,) + lt.directions):
        M = M.tocsr()
        payload[f'L{k}_data'] = M.data
        payload[f'L{k}_indices'] = M.indices
        payload[f'L{k}_indptr'] = M.indptr
    payload['L_shape'] = np.array(lt.base.shape)
    np.savez_compressed(path, **payload)


def load_basis(path):
    with np.load(path, allow_pickle=False) as z:
        shape = tuple(z['L_shape'])
        mats = [sp.csr_matrix((z[f'L{k}_data'], z[f'L{k}_indices'], z[f'L{k}_indptr']),
                              shape=shape) for k in range(int(z['n_directions']) + 1)]
        dim = int(z['hilbert_dim']) or None
        lt = ParameterizedLiouvillian(mats[0], tuple(mats[1:]), z['base_point'],
                                      tuple(str(n) for n in z['names']),
                                      z['trace_vector'], dim)
        red_dirs = tuple(z['reduced_directions']) if len(z['reduced_directions']) else ()
        return PerturbationBasis(z['Q'], lt, z['reduced_base'], red_dirs,
                                 z['reduced_rhs'], z['trace_row'], complex(z['b']))
