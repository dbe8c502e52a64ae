"""
Iterative steady-state backend: left-preconditioned restarted GMRES, recycled
preconditioned Krylov spaces and symmetry-sector reduction.

With the exact inverse of ``L~0`` as preconditioner the recycled space
``span{(C L_j)^k rho0}`` coincides with the span of the perturbative
corrections, so the reduced solve is the same Galerkin problem as in
:mod:`lindvpt.perturbation`.  With an incomplete LU it is a cheaper
approximation to it.
"""

from dataclasses import dataclass, field
from enum import Enum
import itertools

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (DimensionMismatch, IterativeNonConvergence,
                     NonCommutingSymmetry, SectorMissingSteadyState)
from .lindblad import DensityVector, ParameterizedLiouvillian, trace_modify, vec_of_transpose
from .perturbation import (VptSolution, basis_from_columns, multi_indices,
                           vpt_solve)
from .tensor_core import (DTYPE, LUFactorization, as_sparse, ilu_factor,
                          lu_factor, orthonormalize)

__all__ = [
    'IterativeSettings', 'GmresResult', 'RecycledSpace', 'SectorReduction',
    'gmres_solve', 'make_preconditioner', 'build_recycled_space',
    'recycled_solve', 'symmetric_sector_reduce', 'iterative_steady_state',
    'sector_liouvillian', 'SectorFamily',
]


class Method(str, Enum):
    GMRES = 'gmres'
    BICGSTAB = 'bicgstab'


@dataclass(frozen=True)
class IterativeSettings:
    method: str = 'gmres'
    restart: int = 50
    max_iterations: int = 2000
    tolerance: float = 1e-10
    preconditioner: str = 'ilu'
    drop_tolerance: float = 1e-4
    fill_factor: float = 10.0

    def __post_init__(self):
        if self.restart < 1:
            raise ValueError('restart must be >= 1')
        if self.tolerance <= 0:
            raise ValueError('tolerance must be positive')
        Method(self.method)
        if self.preconditioner not in ('none', 'ilu', 'exact'):
            raise ValueError(f'unknown preconditioner {self.preconditioner!r}')


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residuals: list
    converged: bool


def _as_matvec(A):
    if sp.issparse(A) or isinstance(A, np.ndarray):
        return lambda v: A @ v
    if isinstance(A, spla.LinearOperator):
        return A.matvec
    if callable(A):
        return A
    raise TypeError(f'cannot apply {type(A).__name__} as an operator')


def _as_precond(M):
    if M is None:
        return lambda v: v
    if hasattr(M, 'solve'):
        return M.solve
    return _as_matvec(M)


def make_preconditioner(A, settings):
    """Factorize ``A`` according to ``settings.preconditioner``."""
    if settings.preconditioner == 'none':
        return None
    if settings.preconditioner == 'exact':
        return lu_factor(A)
    return ilu_factor(A, settings.drop_tolerance, settings.fill_factor)


def gmres_solve(A, b, x0=None, settings=IterativeSettings(), preconditioner=None):
    """Restarted GMRES with left preconditioning.

    Convergence is declared on the true residual ``||b - A x|| <= tol ||b||``;
    the Arnoldi process works on the preconditioned operator ``C A``.
    Returns the iterate, the number of Arnoldi steps taken, the history of
    true relative residuals (one per restart cycle plus the initial one) and
    a convergence flag.
    """
    if settings.method == Method.BICGSTAB:
        return _bicgstab(A, b, x0, settings, preconditioner)
    matvec = _as_matvec(A)
    prec = _as_precond(preconditioner)
    b = np.asarray(b, dtype=DTYPE)
    n = b.shape[0]
    x = np.zeros(n, dtype=DTYPE) if x0 is None else np.array(x0, dtype=DTYPE)
    if x.shape != b.shape:
        raise DimensionMismatch('initial guess and right-hand side differ in length')
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(np.zeros(n, dtype=DTYPE), 0, [0.0], True)
    tol = settings.tolerance
    r = b - matvec(x)
    history = [np.linalg.norm(r) / bnorm]
    iterations = 0
    m = settings.restart
    while history[-1] > tol and iterations < settings.max_iterations:
        z = prec(r)
        beta = np.linalg.norm(z)
        if beta == 0.0:
            break
        # preconditioned residual target that keeps the true residual below tol
        ptol = tol * bnorm * beta / max(np.linalg.norm(r), 1e-300)
        V = np.zeros((n, m + 1), dtype=DTYPE)
        H = np.zeros((m + 1, m), dtype=DTYPE)
        cs = np.zeros(m, dtype=DTYPE)
        sn = np.zeros(m, dtype=DTYPE)
        g = np.zeros(m + 1, dtype=DTYPE)
        g[0] = beta
        V[:, 0] = z / beta
        k = 0
        for k in range(m):
            iterations += 1
            w = prec(matvec(V[:, k]))
            for i in range(k + 1):
                H[i, k] = np.vdot(V[:, i], w)
                w = w - H[i, k] * V[:, i]
            H[k + 1, k] = np.linalg.norm(w)
            breakdown = abs(H[k + 1, k]) <= 1e-14 * abs(H[:k + 1, k]).max(initial=1.0)
            if not breakdown:
                V[:, k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -np.conj(sn[i]) * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            cs[k], sn[k] = _givens(H[k, k], H[k + 1, k])
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -np.conj(sn[k]) * g[k]
            g[k] = cs[k] * g[k]
            if breakdown or abs(g[k + 1]) <= ptol or iterations >= settings.max_iterations:
                break
        y = np.linalg.solve(np.triu(H[:k + 1, :k + 1]), g[:k + 1]) if H[k, k] != 0 else \
            np.linalg.lstsq(np.triu(H[:k + 1, :k + 1]), g[:k + 1], rcond=None)[0]
        x = x + V[:, :k + 1] @ y
        r = b - matvec(x)
        history.append(np.linalg.norm(r) / bnorm)
        if breakdown and history[-1] > tol and np.linalg.norm(prec(r)) <= 1e-14 * beta:
            break
    return GmresResult(x, iterations, history, bool(history[-1] <= tol))


def _givens(a, b):
    if b == 0:
        return 1.0, 0.0
    if a == 0:
        return 0.0, np.conj(b) / abs(b)
    r = np.hypot(abs(a), abs(b))
    c = abs(a) / r
    s = (a / abs(a)) * np.conj(b) / r
    return c, s


def _bicgstab(A, b, x0, settings, preconditioner):
    n = len(b)
    op = spla.LinearOperator((n, n), matvec=_as_matvec(A), dtype=DTYPE)
    M = None
    if preconditioner is not None:
        M = spla.LinearOperator((n, n), matvec=_as_precond(preconditioner), dtype=DTYPE)
    history = []
    bnorm = np.linalg.norm(b)
    counter = itertools.count(1)
    last = {'k': 0}

    def callback(xk):
        last['k'] = next(counter)
        history.append(np.linalg.norm(b - op.matvec(xk)) / bnorm)

    x, info = spla.bicgstab(op, b, x0=x0, rtol=settings.tolerance, atol=0.0,
                            maxiter=settings.max_iterations, M=M, callback=callback)
    res = np.linalg.norm(b - op.matvec(x)) / bnorm
    history.append(res)
    return GmresResult(x, last['k'], history, bool(res <= settings.tolerance))


def iterative_steady_state(system, settings=IterativeSettings(), x0=None,
                           preconditioner=None):
    """Steady state of a trace-modified system by preconditioned iteration."""
    if preconditioner is None:
        preconditioner = make_preconditioner(system.matrix, settings)
    res = gmres_solve(system.matrix, system.rhs, x0, settings, preconditioner)
    if not res.converged:
        raise IterativeNonConvergence(
            f'GMRES stalled at relative residual {res.residuals[-1]:.2e}')
    x = res.x / np.vdot(system.trace_vector, res.x)
    dim = system.hilbert_dim or int(round(np.sqrt(len(x))))
    return DensityVector(x, dim), preconditioner, res


@dataclass
class RecycledSpace:
    """Orthonormalized preconditioned Krylov vectors with reduced blocks."""
    basis: object
    base_state: DensityVector
    preconditioner: object
    orders: tuple
    raw_vectors: list = field(default_factory=list, repr=False)

    @property
    def size(self):
        return self.basis.size

    @property
    def liouvillian(self):
        return self.basis.liouvillian


def build_recycled_space(preconditioner, rho0, liouvillian, orders, b=1.0,
                         drop_tol=1e-12):
    """Span of ``{rho0, (C L_j) rho0, ...}`` following the correction-grid
    multi-index structure ``v_n = -C sum_j L_j v_{n - e_j}``."""
    orders = tuple(int(m) for m in orders)
    if len(orders) != liouvillian.n_directions:
        raise DimensionMismatch('one order per direction is required')
    prec = _as_precond(preconditioner)
    vecs = {(0,) * len(orders): np.asarray(rho0.data, dtype=DTYPE)}
    for idx in multi_indices(orders, 'degree'):
        if sum(idx) == 0:
            continue
        rhs = np.zeros(liouvillian.dim, dtype=DTYPE)
        for j, Lj in enumerate(liouvillian.directions):
            if idx[j]:
                rhs -= Lj @ vecs[idx[:j] + (idx[j] - 1,) + idx[j + 1:]]
        vecs[idx] = prec(rhs)
    ordered = [vecs[i] for i in multi_indices(orders, 'degree')]
    ob = orthonormalize(ordered, drop_tol)
    basis = basis_from_columns(ob.columns, liouvillian, b,
                               (tuple(liouvillian.base_point),), ob.kept)
    return RecycledSpace(basis, rho0, preconditioner, orders, ordered)


def recycled_solve(space, eps, tol, settings=None, fallback=True):
    """Reduced solve over a recycled space, with a warm-started GMRES fallback.

    The fallback solves ``L~(eps) x = b`` preconditioned by the space's
    preconditioner, starting from the reduced-solve state.  The returned
    solution carries ``iterations`` (0 when the reduced solve sufficed).
    """
    sol = vpt_solve(space.basis, eps, tol)
    sol.iterations = 0
    sol.fell_back = False
    if sol.converged or not fallback:
        return sol
    settings = settings or IterativeSettings()
    lt = space.liouvillian
    system = _trace_modified_at(lt, eps, space.basis.b)
    x0 = sol.state.data if np.all(np.isfinite(sol.state.data)) else None
    gm_settings = IterativeSettings(settings.method, settings.restart,
                                    settings.max_iterations,
                                    min(settings.tolerance, 0.1 * tol / abs(space.basis.b)),
                                    settings.preconditioner)
    res = gmres_solve(system.matrix, system.rhs, x0, gm_settings, space.preconditioner)
    x = res.x / np.vdot(lt.trace_vector, res.x)
    residual = float(np.linalg.norm(lt.matvec(eps, x)))
    out = VptSolution(DensityVector(x, lt.hilbert_dim), sol.coefficients, residual,
                      np.atleast_1d(np.asarray(eps, float)), bool(residual <= tol))
    out.iterations = res.iterations
    out.fell_back = True
    if not out.converged:
        raise IterativeNonConvergence(
            f'fallback GMRES reached residual {residual:.2e} > {tol:.2e}')
    return out


def _trace_modified_at(lt, eps, b):
    return trace_modify(lt.at(eps), b, lt.trace_vector, hilbert_dim=lt.hilbert_dim)


# ---------------------------------------------------------------- sectors ----

@dataclass(frozen=True)
class SectorReduction:
    """Orthonormal trivial-sector basis ``Q`` (sparse, N x k) and ``Q^H L Q``."""
    Q: sp.spmatrix
    block: sp.spmatrix
    group_order: int

    @property
    def dim(self):
        return self.Q.shape[1]

    def reduce(self, L):
        return as_sparse(self.Q.getH() @ L @ self.Q)

    def lift(self, y):
        return self.Q @ y

    def project(self, x):
        return self.Q.getH() @ x


def _close_group(generators, limit=10000):
    """All products of the (commuting) generators, by breadth-first closure."""
    n = generators[0].shape[0]
    eye = sp.identity(n, dtype=DTYPE, format='csr')
    elements = [eye]
    keys = {_key(eye)}
    frontier = [eye]
    while frontier:
        nxt = []
        for g in frontier:
            for s in generators:
                h = as_sparse(s @ g)
                k = _key(h)
                if k not in keys:
                    keys.add(k)
                    elements.append(h)
                    nxt.append(h)
                    if len(elements) > limit:
                        raise ValueError('symmetry group is too large')
        frontier = nxt
    return elements


def _key(M):
    M = M.tocsr()
    M.sort_indices()
    return (M.indptr.tobytes(), M.indices.tobytes(), np.round(M.data, 12).tobytes())


def _orbit_basis(elements):
    """Trivial-sector basis for a group of monomial matrices.

    Each element maps ``e_i`` to ``phase * e_j``; the group average of
    ``e_i`` is supported on the orbit of ``i`` and is either zero or a
    multiple of one sector basis vector.
    """
    n = elements[0].shape[0]
    maps = []
    for g in elements:
        g = g.tocsc()
        if np.any(np.diff(g.indptr) != 1):
            raise ValueError('symmetry superoperators must be monomial matrices')
        maps.append((g.indices.copy(), g.data.copy()))
    seen = np.zeros(n, dtype=bool)
    rows, cols, vals = [], [], []
    k = 0
    for i in range(n):
        if seen[i]:
            continue
        acc = {}
        for target, phase in maps:
            j = target[i]
            acc[j] = acc.get(j, 0.0) + phase[i]
            seen[j] = True
        idx = np.array(sorted(acc))
        v = np.array([acc[j] for j in idx], dtype=DTYPE)
        norm = np.linalg.norm(v)
        if norm <= 1e-12 * len(elements):
            continue
        rows.extend(idx)
        cols.extend([k] * len(idx))
        vals.extend(v / norm)
        k += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, k))


def symmetric_sector_reduce(L, symmetries, check=True, tol=1e-10):
    """Restrict ``L`` to the sector invariant under every symmetry.

    Parameters
    ----------
    L : sparse matrix
    symmetries : sequence of sparse superoperators
        Commuting unitary monomial matrices (site permutations, parity).

    Returns
    -------
    SectorReduction
    """
    L = as_sparse(L)
    syms = [as_sparse(S) for S in symmetries]
    if not syms:
        eye = sp.identity(L.shape[0], dtype=DTYPE, format='csr')
        return SectorReduction(eye, L, 1)
    if check:
        scale = max(abs(L).max(), 1.0)
        for k, S in enumerate(syms):
            c = S @ L - L @ S
            if c.nnz and abs(c).max() > tol * scale:
                raise NonCommutingSymmetry(f'symmetry {k} does not commute with L')
            for S2 in syms[k + 1:]:
                c = S @ S2 - S2 @ S
                if c.nnz and abs(c).max() > tol:
                    raise NonCommutingSymmetry('symmetries do not commute with each other')
    elements = _close_group(syms)
    Q = _orbit_basis(elements)
    n = L.shape[0]
    d = int(round(np.sqrt(n)))
    one = np.zeros(n, dtype=DTYPE)
    one[::d + 1] = 1.0
    if np.linalg.norm(Q.getH() @ one) <= 1e-12:
        raise SectorMissingSteadyState('the invariant sector does not carry the trace')
    block = as_sparse(Q.getH() @ L @ Q)
    return SectorReduction(as_sparse(Q), block, len(elements))


def sector_liouvillian(reduction, lt):
    """Restrict a parameterized Liouvillian (full space) to a sector."""
    base = reduction.reduce(lt.base)
    dirs = tuple(reduction.reduce(Lj) for Lj in lt.directions)
    tv = np.asarray(reduction.Q.getH() @ lt.trace_vector).ravel()
    return ParameterizedLiouvillian(base, dirs, lt.base_point, lt.names, tv,
                                    lt.hilbert_dim)


class SectorFamily:
    """A parameter family restricted to the trivial symmetry sector.

    The symmetries do not depend on the swept parameters, so the reduction
    is built once from the family's base point and reused at every point.
    States returned by sweeps over this family live in the sector; use
    :meth:`lift` (or :meth:`observable`) to get back to the full space.
    """

    def __init__(self, family, symmetries=None, check=True):
        self.family = family
        if symmetries is None:
            symmetries = list(family.prototype.symmetries.values())
        point = [getattr(family.params, a) for a in family.axes]
        self.reduction = symmetric_sector_reduce(family.at(point).base, symmetries, check)
        self.operators = family.operators
        self.axes = family.axes

    def at(self, point):
        return sector_liouvillian(self.reduction, self.family.at(point))

    def lift(self, rho):
        return DensityVector(np.asarray(self.reduction.lift(rho.data)).ravel(),
                             rho.hilbert_dim, rho.kind)

    def observable(self, O):
        """Callable ``rho_sector -> Tr(O rho)`` for use as a sweep observable."""
        row = np.asarray(self.reduction.Q.T @ vec_of_transpose(O)).ravel()
        return lambda rho: complex(row @ rho.data)
