"""
Built-in model builders: driven Kerr resonator, two-mode cat (memory-buffer)
system, dissipative XYZ lattice and a driven two-level system.

Every builder returns a :class:`BuiltModel` holding the Lindblad model at the
requested parameters together with the affine direction generators (the
derivative of the model with respect to each parameter that enters linearly).
"""

from dataclasses import dataclass, field, fields, replace
import itertools
import warnings

import mpmath
import numpy as np
import scipy.sparse as sp

from .errors import (LatticeTooLarge, SeriesNonConvergent, TruncationTooSmall,
                     ZeroDrive)
from .lindblad import (DensityVector, LindbladModel, ParameterizedLiouvillian,
                       build_liouvillian, expectation, parameterize)
from .tensor_core import DTYPE, as_sparse

__all__ = [
    'BuiltModel', 'ModelFamily', 'KerrParams', 'CatParams', 'XYZParams',
    'TwoLevelParams', 'kerr_model', 'cat_model', 'xyz_model', 'two_level_model',
    'kerr_exact_observable', 's21', 'check_truncation', 'MODELS', 'destroy',
]

TRUNCATION_POPULATION = 1e-6


def destroy(n):
    return sp.diags(np.sqrt(np.arange(1, n, dtype=float)), 1, shape=(n, n),
                    dtype=DTYPE, format='csr')


def _eye(n):
    return sp.identity(n, dtype=DTYPE, format='csr')


def _embed(op, position, dims):
    out = sp.identity(1, dtype=DTYPE, format='csr')
    for k, d in enumerate(dims):
        out = sp.kron(out, op if k == position else _eye(d), format='csr')
    return out


def _herm(op):
    return as_sparse(op + op.getH())


@dataclass(frozen=True)
class BuiltModel:
    name: str
    params: object
    model: LindbladModel
    directions: dict
    operators: dict
    mode_dims: tuple = ()
    boson_modes: tuple = ()
    symmetries: dict = field(default_factory=dict)

    def liouvillian(self):
        return build_liouvillian(self.model)

    def parameterized(self, names):
        point = [getattr(self.params, n) for n in names]
        return parameterize(self.model, [self.directions[n] for n in names],
                            base_point=point, names=tuple(names))


def _delta(H):
    """A direction generator built from a Hamiltonian derivative."""
    return LindbladModel(H, (), check_rates=False)


# ---------------------------------------------------------------- Kerr ----

@dataclass(frozen=True)
class KerrParams:
    """Driven Kerr resonator; ``n_max`` is the number of Fock levels kept."""
    delta: float = 0.0
    K: float = 10.0
    F: float = 10.0
    kappa: float = 1.0
    n_max: int = 30

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError('kappa must be positive')
        if self.n_max < 2:
            raise TruncationTooSmall('n_max must be at least 2')


def kerr_model(p):
    """``H = -delta a^dag a - K/2 a^dag a^dag a a + F (a + a^dag)``, loss ``kappa D[a]``."""
    a = destroy(p.n_max)
    ad = as_sparse(a.getH())
    n = as_sparse(ad @ a)
    kerr = as_sparse(ad @ ad @ a @ a)
    drive = _herm(a)
    H = -p.delta * n - 0.5 * p.K * kerr + p.F * drive
    model = LindbladModel(H, ((a, p.kappa),))
    directions = {'delta': _delta(-n), 'F': _delta(drive), 'K': _delta(-0.5 * kerr)}
    ops = {'a': a, 'adag': ad, 'n': n}
    return BuiltModel('kerr', p, model, directions, ops, (p.n_max,), (0,))


def _hyp0f2_ratio(c, d, k, j, z):
    num = mpmath.hyper([], [c + k, d + j], z)
    den = mpmath.hyper([], [c, d], z)
    return num / den


def kerr_exact_observable(p, j=1, k=1, dps=40):
    """Closed-form ``<(a^dag)^j a^k>`` of the driven Kerr steady state.

    Obtained from the complex-P representation, whose potential solution is
    ``P(alpha, beta) ~ alpha^(c-2) beta^(d-2) exp(x/alpha + y/beta + 2 alpha beta)``
    with ``c = (2 delta + i kappa)/K``, ``d = conj(c)``, ``x = y = 2F/K``.
    The moments reduce to ratios of ``0F2`` series in ``z = 2xy``.
    """
    if p.K == 0 or p.kappa <= 0:
        raise SeriesNonConvergent('closed form requires K != 0 and kappa > 0')
    if p.F == 0:
        return complex(1.0 if j == k == 0 else 0.0)
    with mpmath.workdps(dps):
        c = mpmath.mpc(2 * p.delta, p.kappa) / p.K
        d = mpmath.conj(c)
        x = mpmath.mpf(2 * p.F) / p.K
        z = 2 * x * x
        try:
            ratio = _hyp0f2_ratio(c, d, k, j, z)
        except (ZeroDivisionError, mpmath.libmp.NoConvergence) as exc:
            raise SeriesNonConvergent(str(exc)) from exc
        value = x ** (j + k) * ratio / (mpmath.rf(c, k) * mpmath.rf(d, j))
        if not mpmath.isfinite(value):
            raise SeriesNonConvergent('series evaluation overflowed')
        return complex(value)


# ----------------------------------------------------------------- cat ----

@dataclass(frozen=True)
class CatParams:
    """Memory (``a``) and buffer (``b``) modes; truncations are level counts."""
    delta_a: float = 0.0
    delta_b: float = 0.0
    g2: float = 2.0
    F: float = 2.0
    Ka: float = 0.1
    Kb: float = 0.3
    chi: float = 0.0
    kappa_a: float = 0.1
    kappa_b: float = 10.0
    n_a: int = 10
    n_b: int = 6

    def __post_init__(self):
        if self.kappa_a <= 0 or self.kappa_b <= 0:
            raise ValueError('loss rates must be positive')
        if self.n_a < 2 or self.n_b < 2:
            raise TruncationTooSmall('truncations must be at least 2')


def cat_model(p):
    dims = (p.n_a, p.n_b)
    a = _embed(destroy(p.n_a), 0, dims)
    b = _embed(destroy(p.n_b), 1, dims)
    ad, bd = as_sparse(a.getH()), as_sparse(b.getH())
    na, nb = as_sparse(ad @ a), as_sparse(bd @ b)
    conv = _herm(a @ a @ bd)
    drive = _herm(b)
    kerr_a = as_sparse(ad @ ad @ a @ a)
    kerr_b = as_sparse(bd @ bd @ b @ b)
    H = (-p.delta_a * na - p.delta_b * nb + p.g2 * conv + p.F * drive
         - p.Ka * kerr_a - p.Kb * kerr_b + p.chi * (na @ nb))
    model = LindbladModel(H, ((a, p.kappa_a), (b, p.kappa_b)))
    directions = {'delta_a': _delta(-na), 'delta_b': _delta(-nb), 'g2': _delta(conv),
                  'F': _delta(drive), 'Ka': _delta(-kerr_a), 'Kb': _delta(-kerr_b)}
    ops = {'a': a, 'adag': ad, 'b': b, 'bdag': bd, 'na': na, 'nb': nb}
    return BuiltModel('cat2mode', p, model, directions, ops, dims, (0, 1))


def s21(rho, p, b_op=None):
    """Buffer response ``1 - i kappa_b <b> / F``."""
    if p.F == 0:
        raise ZeroDrive('S21 is undefined at zero drive')
    if b_op is None:
        b_op = _embed(destroy(p.n_b), 1, (p.n_a, p.n_b))
    return 1.0 - 1j * p.kappa_b * expectation(rho, b_op) / p.F


# ----------------------------------------------------------------- XYZ ----

SIGMA_X = sp.csr_matrix(np.array([[0, 1], [1, 0]], dtype=DTYPE))
SIGMA_Y = sp.csr_matrix(np.array([[0, -1j], [1j, 0]], dtype=DTYPE))
SIGMA_Z = sp.csr_matrix(np.array([[1, 0], [0, -1]], dtype=DTYPE))
# basis order (up, down); sigma^- maps up -> down
SIGMA_MINUS = sp.csr_matrix(np.array([[0, 0], [1, 0]], dtype=DTYPE))


@dataclass(frozen=True)
class XYZParams:
    Lx: int = 2
    Ly: int = 2
    Jx: float = 0.9
    Jy: float = 1.1
    Jz: float = 1.0
    gamma: float = 1.0
    periodic_x: bool = True
    periodic_y: bool = True
    max_spins: int = 9

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError('gamma must be positive')
        if self.Lx * self.Ly > self.max_spins:
            raise LatticeTooLarge(
                f'{self.Lx}x{self.Ly} lattice exceeds the cap of {self.max_spins} spins')


def lattice_bonds(Lx, Ly, periodic_x=True, periodic_y=True):
    """Nearest-neighbour pairs, each unordered pair counted once."""
    bonds = set()
    for x, y in itertools.product(range(Lx), range(Ly)):
        s = x + Lx * y
        if x + 1 < Lx or (periodic_x and Lx > 1):
            t = (x + 1) % Lx + Lx * y
            if t != s:
                bonds.add((min(s, t), max(s, t)))
        if y + 1 < Ly or (periodic_y and Ly > 1):
            t = x + Lx * ((y + 1) % Ly)
            if t != s:
                bonds.add((min(s, t), max(s, t)))
    return sorted(bonds)


def _site_permutation_unitary(perm, n_sites):
    """Unitary moving the spin on site ``s`` to site ``perm[s]``."""
    dim = 2 ** n_sites
    idx = np.arange(dim)
    bits = (idx[:, None] >> (n_sites - 1 - np.arange(n_sites))[None, :]) & 1
    new_bits = np.empty_like(bits)
    new_bits[:, perm] = bits
    target = (new_bits << (n_sites - 1 - np.arange(n_sites))[None, :]).sum(axis=1)
    return sp.csr_matrix((np.ones(dim, dtype=DTYPE), (target, idx)), shape=(dim, dim))


def _unitary_superoperator(U):
    """Matrix of ``rho -> U rho U^dag`` in column stacking."""
    return sp.kron(U.conj(), U, format='csr')


def xyz_model(p):
    n = p.Lx * p.Ly
    dims = (2,) * n
    sig = {ax: [_embed(op, s, dims) for s in range(n)]
           for ax, op in (('x', SIGMA_X), ('y', SIGMA_Y), ('z', SIGMA_Z))}
    bonds = lattice_bonds(p.Lx, p.Ly, p.periodic_x, p.periodic_y)
    dim = 2 ** n
    couplings = {}
    for ax in 'xyz':
        H = sp.csr_matrix((dim, dim), dtype=DTYPE)
        for s, t in bonds:
            H = H + sig[ax][s] @ sig[ax][t]
        couplings[ax] = as_sparse(H)
    H = p.Jx * couplings['x'] + p.Jy * couplings['y'] + p.Jz * couplings['z']
    minus = [_embed(SIGMA_MINUS, s, dims) for s in range(n)]
    model = LindbladModel(H, tuple((m, p.gamma) for m in minus))
    directions = {'Jx': _delta(couplings['x']), 'Jy': _delta(couplings['y']),
                  'Jz': _delta(couplings['z'])}
    ops = {'sigma_minus': minus, 'sigma_plus': [as_sparse(m.getH()) for m in minus],
           'sigma_x': sig['x'], 'sigma_y': sig['y'], 'sigma_z': sig['z'],
           'mz': as_sparse(sum(sig['z']) / n)}
    symmetries = {}
    if p.periodic_x and p.Lx > 1:
        perm = [((s % p.Lx) + 1) % p.Lx + p.Lx * (s // p.Lx) for s in range(n)]
        symmetries['Tx'] = _unitary_superoperator(_site_permutation_unitary(perm, n))
    if p.periodic_y and p.Ly > 1:
        perm = [(s % p.Lx) + p.Lx * (((s // p.Lx) + 1) % p.Ly) for s in range(n)]
        symmetries['Ty'] = _unitary_superoperator(_site_permutation_unitary(perm, n))
    parity = sp.identity(1, dtype=DTYPE, format='csr')
    for _ in range(n):
        parity = sp.kron(parity, SIGMA_Z, format='csr')
    symmetries['P'] = _unitary_superoperator(parity)
    return BuiltModel('xyz', p, model, directions, ops, dims, (), symmetries)


# ----------------------------------------------------------- two-level ----

@dataclass(frozen=True)
class TwoLevelParams:
    """Driven two-level system; basis (ground, excited)."""
    delta: float = 0.0
    omega: float = 0.5
    kappa: float = 1.0


def two_level_model(p):
    sm = sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=DTYPE))
    sp_ = as_sparse(sm.getH())
    ne = as_sparse(sp_ @ sm)
    drive = _herm(sm)
    H = -p.delta * ne + p.omega * drive
    model = LindbladModel(H, ((sm, p.kappa),))
    directions = {'delta': _delta(-ne), 'omega': _delta(drive)}
    ops = {'sigma_minus': sm, 'sigma_plus': sp_, 'ne': ne,
           'sigma_z': sp.csr_matrix(np.diag([1.0, -1.0]).astype(DTYPE))}
    return BuiltModel('two_level', p, model, directions, ops, (2,), ())


MODELS = {
    'kerr': (KerrParams, kerr_model),
    'cat2mode': (CatParams, cat_model),
    'xyz': (XYZParams, xyz_model),
    'two_level': (TwoLevelParams, two_level_model),
}


def check_truncation(rho, built, threshold=TRUNCATION_POPULATION, strict=False):
    """Population of the two highest Fock levels of every bosonic mode.

    Warns (or raises ``TruncationTooSmall`` when ``strict``) if any exceeds
    ``threshold``.  Returns the worst population found.
    """
    dims = built.mode_dims
    if not built.boson_modes:
        return 0.0
    pops = np.real(np.diag(rho.matrix())).reshape(dims)
    worst = 0.0
    for m in built.boson_modes:
        axes = tuple(k for k in range(len(dims)) if k != m)
        marginal = pops.sum(axis=axes) if axes else pops
        worst = max(worst, float(marginal[-2:].sum()))
    if worst > threshold:
        msg = f'top Fock levels hold population {worst:.2e} > {threshold:.0e}; raise the truncation'
        if strict:
            raise TruncationTooSmall(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return worst


class ModelFamily:
    """Re-baselinable family ``theta -> ParameterizedLiouvillian``.

    ``axes`` name the parameters that vary; they must be direction keys of the
    built model, i.e. enter the Liouvillian affinely.
    """

    def __init__(self, builder, params, axes):
        self.builder = builder
        self.params = params
        self.axes = tuple(axes)
        probe = builder(params)
        missing = [a for a in self.axes if a not in probe.directions]
        if missing:
            raise ValueError(f'parameters {missing} do not enter the model affinely')
        self._directions = [build_liouvillian(probe.directions[a]) for a in self.axes]
        self.operators = probe.operators
        self.prototype = probe

    def params_at(self, point):
        return replace(self.params, **dict(zip(self.axes, map(float, point))))

    def built_at(self, point):
        return self.builder(self.params_at(point))

    def at(self, point):
        built = self.built_at(point)
        return parameterize(build_liouvillian(built.model), self._directions,
                            base_point=np.asarray(point, float), names=self.axes)

    @property
    def n_axes(self):
        return len(self.axes)
