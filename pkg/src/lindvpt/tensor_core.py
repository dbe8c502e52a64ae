"""
Sparse and small dense complex linear algebra used by every solver path.

Sparse matrices are plain ``scipy.sparse`` CSR/CSC matrices with complex128
entries; the wrappers below only pin down the conventions (dtype, sorted
indices, error types) the rest of the package relies on.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence
import warnings

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (BreakdownZeroPivot, DimensionMismatch, EmptyInput,
                     SingularMatrix)

__all__ = [
    'as_sparse', 'LUFactorization', 'ILUFactorization', 'OrthonormalBasis',
    'lu_factor', 'lu_solve', 'ilu_factor', 'orthonormalize',
    'small_dense_solve', 'DenseSolveResult', 'dense_svd', 'kron',
    'read_matrix_market', 'write_matrix_market',
]

DTYPE = np.complex128

# Symmetric (A^T + A) minimum-degree ordering with threshold partial pivoting.
DEFAULT_ORDERING = 'MMD_AT_PLUS_A'
DEFAULT_PIVOT_THRESHOLD = 0.1


def as_sparse(A, fmt='csr'):
    """Return ``A`` as a complex128 sparse matrix with canonical indices."""
    if sp.issparse(A):
        M = A.asformat(fmt).astype(DTYPE, copy=True)
    else:
        M = sp.csr_matrix(np.asarray(A, dtype=DTYPE)).asformat(fmt)
    if M.shape[0] < 1 or M.shape[1] < 1:
        raise DimensionMismatch(f'matrix dimensions must be positive, got {M.shape}')
    M.sum_duplicates()
    M.sort_indices()
    return M


def _check_square(A):
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f'expected a square matrix, got shape {A.shape}')


def _permutation_matrix(perm, rows=True):
    n = len(perm)
    ones = np.ones(n)
    if rows:
        return sp.csc_matrix((ones, (perm, np.arange(n))), shape=(n, n))
    return sp.csc_matrix((ones, (np.arange(n), perm)), shape=(n, n))


@dataclass(frozen=True)
class LUFactorization:
    """Sparse LU factors with ``Pr A Pc = L U`` (``L`` unit lower triangular).

    Solves against one factorization are safe to run concurrently.
    """
    _superlu: object = field(repr=False)
    shape: tuple

    @property
    def lower(self):
        return self._superlu.L

    @property
    def upper(self):
        return self._superlu.U

    @property
    def row_perm(self):
        return self._superlu.perm_r

    @property
    def col_perm(self):
        return self._superlu.perm_c

    @property
    def dim(self):
        return self.shape[0]

    def row_permutation_matrix(self):
        return _permutation_matrix(self.row_perm, rows=True)

    def col_permutation_matrix(self):
        return _permutation_matrix(self.col_perm, rows=False)

    def solve(self, b):
        return lu_solve(self, b)

    def as_operator(self):
        """The inverse as a ``LinearOperator``."""
        return spla.LinearOperator(self.shape, matvec=self.solve, dtype=DTYPE)


@dataclass(frozen=True)
class ILUFactorization(LUFactorization):
    drop_tolerance: float = 0.0
    fill_factor: float = 10.0
    diagonal_shift: float = 0.0


@dataclass(frozen=True)
class OrthonormalBasis:
    """Orthonormal columns plus the input positions they were built from."""
    columns: np.ndarray
    kept: tuple = ()

    @property
    def dim(self):
        return self.columns.shape[0]

    @property
    def size(self):
        return self.columns.shape[1]

    def __len__(self):
        return self.size


def lu_factor(A, ordering=DEFAULT_ORDERING, pivot_threshold=DEFAULT_PIVOT_THRESHOLD):
    """Factorize a square sparse matrix with SuperLU.

    Parameters
    ----------
    A : sparse matrix or array
        Square, structurally nonsingular after pivoting.
    ordering : str
        Column pre-ordering passed to SuperLU (``permc_spec``).
    pivot_threshold : float
        Threshold for partial pivoting; 1.0 is classical partial pivoting.

    Raises
    ------
    SingularMatrix
        If a zero pivot survives pivoting.
    """
    M = as_sparse(A, 'csc')
    _check_square(M)
    try:
        lu = spla.splu(M, permc_spec=ordering, diag_pivot_thresh=pivot_threshold)
    except RuntimeError as exc:
        raise SingularMatrix(str(exc)) from exc
    return LUFactorization(lu, M.shape)


def lu_solve(F, b):
    """Forward and backward substitution against a stored factorization."""
    b = np.asarray(b)
    if b.shape[0] != F.shape[0]:
        raise DimensionMismatch(
            f'right-hand side has length {b.shape[0]}, factorization has {F.shape[0]}')
    return F._superlu.solve(np.asarray(b, dtype=DTYPE))


def ilu_factor(A, drop_tolerance=1e-4, fill_factor=10.0, ordering='COLAMD'):
    """Incomplete LU with entry dropping.

    A zero-pivot breakdown is retried once with the diagonal shifted by
    ``1e-8 * max|A_ij|``; a second failure raises ``BreakdownZeroPivot``.
    With ``drop_tolerance=0`` and an unbounded ``fill_factor`` the result is
    the complete factorization.
    """
    M = as_sparse(A, 'csc')
    _check_square(M)
    shift = 0.0
    try:
        ilu = spla.spilu(M, drop_tol=drop_tolerance, fill_factor=fill_factor,
                         permc_spec=ordering)
    except RuntimeError:
        shift = 1e-8 * abs(M).max()
        shifted = (M + shift * sp.identity(M.shape[0], dtype=DTYPE, format='csc')).tocsc()
        try:
            ilu = spla.spilu(shifted, drop_tol=drop_tolerance, fill_factor=fill_factor,
                             permc_spec=ordering)
        except RuntimeError as exc:
            raise BreakdownZeroPivot(str(exc)) from exc
    return ILUFactorization(ilu, M.shape, drop_tolerance, fill_factor, shift)


def orthonormalize(vectors, drop_tol=1e-12, start=None, block=32):
    """Gram-Schmidt with one full reorthogonalization pass (CGS2).

    Vectors are processed in blocks: each block is projected twice against
    the basis built so far (matrix-matrix products), then orthonormalized
    column by column, again with two passes.  A vector whose norm after
    projection falls below ``drop_tol`` times its original norm is
    discarded.  Up to rounding this is modified Gram-Schmidt with
    reorthogonalization.

    Parameters
    ----------
    vectors : sequence of 1-D arrays, or 2-D array whose columns are vectors
    start : 2-D array, optional
        Orthonormal columns to extend; they are kept as the leading columns
        and are not counted in ``kept``.

    Returns
    -------
    OrthonormalBasis
    """
    if isinstance(vectors, np.ndarray) and vectors.ndim == 2:
        cols = [vectors[:, i] for i in range(vectors.shape[1])]
    else:
        cols = list(vectors)
    if not cols and start is None:
        raise EmptyInput('no vectors to orthonormalize')
    dim = np.asarray(cols[0]).shape[0] if cols else start.shape[0]
    k0 = 0 if start is None else start.shape[1]
    basis = np.zeros((dim, min(len(cols) + k0, dim)), dtype=DTYPE)
    if k0:
        if start.shape[0] != dim:
            raise DimensionMismatch('start basis has the wrong ambient dimension')
        basis[:, :k0] = start
    kept = []
    k = k0
    for b0 in range(0, len(cols), block):
        chunk = cols[b0:b0 + block]
        if any(np.shape(v) != (dim,) for v in chunk):
            raise DimensionMismatch('vectors must share one ambient dimension')
        W = np.array(np.column_stack(chunk), dtype=DTYPE)
        norm0 = np.linalg.norm(W, axis=0)
        B = basis[:, :k]
        for _ in range(2):
            W -= B @ (W.conj().T @ B).conj().T
        k_block = k
        for c in range(W.shape[1]):
            if norm0[c] == 0.0 or k == basis.shape[1]:
                continue
            w = W[:, c]
            Bb = basis[:, k_block:k]
            for _ in range(2):
                w -= Bb @ (w.conj() @ Bb).conj()
            norm = np.linalg.norm(w)
            # heavy cancellation exposes rounding left along the earlier
            # blocks; project against the whole basis until the norm settles
            prev = norm0[c]
            for _ in range(3):
                if norm >= 0.5 * prev or norm < drop_tol * norm0[c]:
                    break
                prev = norm
                Bk = basis[:, :k]
                w -= Bk @ (w.conj() @ Bk).conj()
                norm = np.linalg.norm(w)
            if norm < drop_tol * norm0[c]:
                continue
            basis[:, k] = w / norm
            kept.append(b0 + c)
            k += 1
    return OrthonormalBasis(basis[:, :k].copy(), tuple(kept))


class DenseSolveResult(NamedTuple):
    x: np.ndarray
    rank_deficient: bool


def small_dense_solve(A, b):
    """Solve a small dense system, falling back to minimum-norm least squares.

    ``b`` may hold several right-hand sides as columns.
    """
    A = np.asarray(A, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    with warnings.catch_warnings():
        warnings.simplefilter('error', scipy.linalg.LinAlgWarning)
        try:
            return DenseSolveResult(scipy.linalg.solve(A, b), False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
            pass
    x = scipy.linalg.lstsq(A, b)[0]
    return DenseSolveResult(x, True)


def dense_svd(A):
    """Thin SVD returning ``(U, s, V)`` with ``A = U diag(s) V^H``."""
    U, s, Vh = scipy.linalg.svd(np.asarray(A, dtype=DTYPE), full_matrices=False)
    return U, s, Vh.conj().T


def kron(A, B):
    return sp.kron(as_sparse(A), as_sparse(B), format='csr')


def read_matrix_market(path):
    return as_sparse(scipy.io.mmread(str(path)))


def write_matrix_market(path, A):
    scipy.io.mmwrite(str(path), sp.coo_matrix(as_sparse(A)), field='complex',
                     symmetry='general', precision=17)
