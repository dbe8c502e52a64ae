"""Small shared builders for the test suite."""

import numpy as np
import scipy.sparse as sp

from lindvpt.lindblad import LindbladModel, build_liouvillian, parameterize
from lindvpt.models import KerrParams, TwoLevelParams, kerr_model, two_level_model


def random_model(dim, n_jumps=2, seed=0):
    """Random Hermitian H plus random jumps; generically a unique steady state."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    H = 0.5 * (A + A.conj().T)
    jumps = []
    for _ in range(n_jumps):
        J = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        jumps.append((sp.csr_matrix(J), rng.uniform(0.2, 1.0)))
    return LindbladModel(sp.csr_matrix(H), tuple(jumps))


def random_hermitian(dim, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return sp.csr_matrix(0.5 * (A + A.conj().T))


def kerr_family(names=('delta',), **kw):
    p = KerrParams(**kw)
    built = kerr_model(p)
    return built, built.parameterized(list(names))


def two_level_family(names=('delta', 'omega'), **kw):
    built = two_level_model(TwoLevelParams(**kw))
    return built, built.parameterized(list(names))


def random_parameterized(dim, n_dirs, seed=0):
    base = random_model(dim, seed=seed)
    dirs = [LindbladModel(random_hermitian(dim, seed + 100 + k), (), check_rates=False)
            for k in range(n_dirs)]
    return parameterize(base, dirs)


def dense_liouvillian(model):
    return build_liouvillian(model).toarray()
