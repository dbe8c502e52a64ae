"""
Steady-state parameter estimation with VPT gradients.

The unknown parameters ``phi`` enter the Liouvillian affinely, so at a base
point the dependence on ``phi_k`` is one more perturbation direction
``L_2``.  Correction grids with orders ``(M_theta..., 1)`` hold both the
corrections ``rho^(n,0)`` that describe the controllable axes ``theta`` and
their first-order companions ``rho^(n,1)`` along ``phi_k``.

Two estimators of ``d rho / d phi_k`` are provided:

* fixed coefficients -- the VPT coefficients ``c_n(eps)`` are frozen and only
  the correction vectors vary with ``delta``;
* reduced equation -- ``(Q^H L~(eps) Q) dq = -(Q^H L_2 Q) q`` over the
  orthonormalized union ``Q`` of both layers (the default).
"""

from dataclasses import dataclass, field, replace
import time
import warnings

import numpy as np
from scipy.optimize import minimize

from .coverage import Axis, SweepPlan, grow_region
from .errors import LindVPTError, MissingDeltaGrid, ReducedSystemSingular, ZeroDrive
from .lindblad import (DensityVector, ParameterizedLiouvillian, expectation,
                       identity_vector, steady_state_lu, vec_of_transpose)
from .models import ModelFamily
from .perturbation import (DEDUP_TOL, basis_from_columns, build_basis, pt_corrections_grid,
                           vpt_solve)
from .tensor_core import orthonormalize, small_dense_solve

__all__ = [
    'AffineObservable', 'FitProblem', 'GradientReport', 'CostReport',
    'FitSettings', 'FitResult', 'state_derivative_fixed',
    'state_derivative_reduced', 'fixed_coefficients', 'evaluate',
    'cost_and_gradient', 'fit', 'generate_data', 's21_observable',
    'exact_observable_values', 'delta_layer',
]


@dataclass(frozen=True)
class AffineObservable:
    """``o = offset + scale(params) * Tr(O rho)``.

    ``operator`` names an entry of the model's operator table.  ``scale`` and
    ``scale_grad`` take a dict of parameter values; ``scale_grad`` returns
    ``{name: d scale / d name}`` for the parameters ``scale`` depends on.
    """
    operator: str
    offset: complex = 0.0
    scale: object = None
    scale_grad: object = None

    def factor(self, params):
        return 1.0 if self.scale is None else complex(self.scale(params))

    def factor_derivative(self, params, name):
        if self.scale_grad is None:
            return 0.0
        return complex(self.scale_grad(params).get(name, 0.0))

    def value(self, trace_value, params):
        return self.offset + self.factor(params) * trace_value


def s21_observable():
    """``S21 = 1 - i kappa_b <b> / F``."""
    def scale(p):
        if p['F'] == 0:
            raise ZeroDrive('S21 is undefined at zero drive')
        return -1j * p['kappa_b'] / p['F']

    def grad(p):
        return {'F': 1j * p['kappa_b'] / p['F'] ** 2, 'kappa_b': -1j / p['F']}

    return AffineObservable('b', 1.0, scale, grad)


@dataclass
class FitProblem:
    """Least-squares fit of unknown parameters to data on a ``theta`` grid.

    ``data`` is indexed like ``SweepPlan(theta).points()`` (C order).
    """
    builder: object
    params: object
    theta: tuple
    unknowns: tuple
    initial: np.ndarray
    bounds: np.ndarray
    data: np.ndarray
    observable: AffineObservable
    orders: tuple = (4,)
    tolerance: float = 1e-9
    seed: int = 0
    b: float = 1.0

    def __post_init__(self):
        self.theta = tuple(a if isinstance(a, Axis) else Axis(*a) for a in self.theta)
        self.unknowns = tuple(self.unknowns)
        self.initial = np.asarray(self.initial, dtype=float)
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        self.data = np.asarray(self.data, dtype=complex).ravel()
        self.orders = tuple(int(m) for m in np.broadcast_to(self.orders, len(self.theta)))
        n_theta = int(np.prod([a.points for a in self.theta]))
        if self.data.shape[0] != n_theta:
            raise ValueError(f'dataset has {self.data.shape[0]} values, theta grid {n_theta}')
        k = len(self.unknowns)
        if self.initial.shape != (k,) or self.bounds.shape != (k, 2):
            raise ValueError('initial guess and bounds must match the unknowns')
        if not np.all(np.isfinite(self.bounds)):
            raise ValueError('bounds must be finite')
        if np.any(self.initial < self.bounds[:, 0]) or np.any(self.initial > self.bounds[:, 1]):
            raise ValueError('initial guess lies outside the bounds')

    @property
    def theta_names(self):
        return tuple(a.name for a in self.theta)

    def plan(self):
        return SweepPlan(self.theta, 'vpt', self.orders, self.tolerance, self.seed, b=self.b)

    def params_at(self, phi):
        return replace(self.params, **dict(zip(self.unknowns, map(float, phi))))


@dataclass
class GradientReport:
    gradient: np.ndarray
    estimator: str
    state_derivatives: dict = field(default_factory=dict)


@dataclass
class CostReport:
    cost: float
    gradient: GradientReport
    values: np.ndarray
    residuals: np.ndarray
    n_base_points: int
    confident: bool = True


# ----------------------------------------------------------- derivatives ---

def _split_grid(grid):
    """``{n: rho^(n,0)}`` and ``{n: rho^(n,1)}`` from a grid with a last
    (``delta``) order of at least one."""
    if grid.orders[-1] < 1:
        raise MissingDeltaGrid('correction grid has no first order along delta')
    zero, one = {}, {}
    for idx, v in grid.corrections.items():
        if idx[-1] == 0:
            zero[idx[:-1]] = v
        elif idx[-1] == 1:
            one[idx[:-1]] = v
    if not one:
        raise MissingDeltaGrid('correction grid holds no (n, 1) corrections')
    return zero, one


def fixed_coefficients(grid, state, eps=None):
    """Coefficients of ``state`` in the raw ``rho^(n,0)`` vectors.

    The vectors are generally linearly dependent, so the coefficients are not
    unique.  With ``eps`` given, the series values ``c_n = prod_j eps_j^n_j``
    (rescaled to the state's normalization) serve as the anchor and only the minimum-norm (column-equilibrated)
    correction needed to reproduce ``state`` is added.  Without ``eps`` only
    the linearly independent vectors (lowest orders first) get coefficients
    and the rest are zero.
    """
    zero, _ = _split_grid(grid)
    keys = sorted(zero, key=lambda i: (sum(i), i))
    x = state.data if isinstance(state, DensityVector) else np.asarray(state)
    if eps is not None:
        eps = np.atleast_1d(np.asarray(eps, dtype=float))
        V = np.column_stack([zero[k] for k in keys])
        norms = np.linalg.norm(V, axis=0)
        norms[norms == 0] = 1.0
        ref = np.array([np.prod(eps ** np.array(k)) for k in keys], dtype=complex)
        # the state has unit trace while the series need not
        y = V @ ref
        ref = ref * (np.vdot(y, x) / np.vdot(y, y))
        r = x - V @ ref
        c = ref + np.linalg.lstsq(V / norms, r, rcond=None)[0] / norms
        return dict(zip(keys, c))
    kept = orthonormalize([zero[k] for k in keys], DEDUP_TOL).kept
    V = np.column_stack([zero[keys[i]] for i in kept])
    norms = np.linalg.norm(V, axis=0)
    c = np.linalg.lstsq(V / norms, x, rcond=None)[0] / norms
    out = dict.fromkeys(keys, 0.0)
    out.update(zip((keys[i] for i in kept), c))
    return out


def state_derivative_fixed(grid, eps, coefficients):
    """``d rho / d delta`` with the VPT coefficients held fixed.

    Parameters
    ----------
    grid : CorrectionGrid
        Orders ``(M_theta..., >= 1)``; the last direction is ``delta``.
    eps : array
        Offset along the ``theta`` directions (unused beyond bookkeeping: the
        dependence on ``eps`` is carried by ``coefficients``).
    coefficients : dict ``n -> c_n`` over the ``theta`` multi-indices

    Returns
    -------
    DensityVector
        ``[N sum c_n rho^(n,1) - (dN) rho^PT] / N^2`` with ``N = Tr rho^PT``.
    """
    zero, one = _split_grid(grid)
    dim = grid.base_state.hilbert_dim
    one_vec = identity_vector(dim)
    rho = np.zeros_like(grid.base_state.data)
    d = np.zeros_like(rho)
    for n, c in coefficients.items():
        if n not in zero:
            raise MissingDeltaGrid(f'coefficient index {n} is not in the grid')
        rho = rho + c * zero[n]
        if n in one:
            d = d + c * one[n]
    N = np.vdot(one_vec, rho)
    dN = np.vdot(one_vec, d)
    return DensityVector((N * d - dN * rho) / N ** 2, dim, 'traceless')


def state_derivative_reduced(basis, eps, delta_index=-1):
    """``d rho / d delta`` from the reduced derivative equation.

    ``basis`` is a :class:`PerturbationBasis` over the union of the ``(n,0)``
    and ``(n,1)`` corrections, built on a Liouvillian whose direction
    ``delta_index`` is ``L_2``.  ``eps`` gives the ``theta`` offsets; the
    ``delta`` offset is zero.

    Raises
    ------
    ReducedSystemSingular
        If the reduced matrix is rank deficient.
    """
    n_dir = len(basis.reduced_directions)
    k = delta_index % n_dir
    full = np.zeros(n_dir)
    theta = [j for j in range(n_dir) if j != k]
    full[theta] = np.atleast_1d(np.asarray(eps, dtype=float))
    A = basis.reduced_matrix(full)
    sol = small_dense_solve(A, np.column_stack([basis.reduced_rhs]))
    if sol.rank_deficient:
        raise ReducedSystemSingular('reduced trace-modified system is singular')
    q = sol.x[:, 0]
    dq = small_dense_solve(A, -(basis.reduced_directions[k] @ q)).x
    N = basis.trace_row @ q
    dN = basis.trace_row @ dq
    x = basis.Q @ ((dq * N - q * dN) / N ** 2)
    return DensityVector(x, basis.liouvillian.hilbert_dim, 'traceless')


# --------------------------------------------------------------- engine ----

def delta_layer(F, grid, directions, delta_direction):
    """Extend a ``theta`` correction grid by the first order along ``delta``.

    ``rho^(n,1) = L~0^{-1}(-sum_j L_j rho^(n-e_j,1) - L_2 rho^(n,0))`` followed
    by the grid's gauge fixing.  Returns a grid with orders ``(M..., 1)``.
    """
    x0 = grid.base_state.data
    unit0 = x0 / np.linalg.norm(x0)
    one = identity_vector(grid.base_state.hilbert_dim)
    corr = {i + (0,): v for i, v in grid.corrections.items()}
    by_degree = {}
    for idx in grid.indices('degree'):
        by_degree.setdefault(sum(idx), []).append(idx)
    for deg in sorted(by_degree):
        level = by_degree[deg]
        R = np.zeros((x0.shape[0], len(level)), dtype=complex)
        for c, idx in enumerate(level):
            R[:, c] = -(delta_direction @ grid.corrections[idx])
            for j, Lj in enumerate(directions):
                if idx[j]:
                    R[:, c] -= Lj @ corr[idx[:j] + (idx[j] - 1,) + idx[j + 1:] + (1,)]
        S = F.solve(R)
        if grid.gauge == 'orthogonal':
            S = S - np.outer(unit0, unit0.conj() @ S)
        else:
            S = S - np.outer(x0, one.conj() @ S)
        for c, idx in enumerate(level):
            corr[idx + (1,)] = S[:, c]
    return replace(grid, orders=grid.orders + (1,), corrections=corr, sigma_traces={})


class _FitRegion:
    """Base point of the fit sweep: state basis plus one derivative basis per unknown."""

    def __init__(self, problem, family, theta_point, phi):
        self.problem = problem
        point = np.concatenate([theta_point, phi])
        lt = family.at(point)
        d = len(problem.theta)
        self.theta_lt = ParameterizedLiouvillian(lt.base, lt.directions[:d], theta_point,
                                                 lt.names[:d], lt.trace_vector, lt.hilbert_dim)
        rho0, F = steady_state_lu(self.theta_lt.trace_modified(problem.b))
        self.rho0 = rho0
        theta_grid = pt_corrections_grid(F, rho0, self.theta_lt.directions, problem.orders)
        self.state_basis = build_basis(theta_grid, self.theta_lt, problem.b)
        self.size = self.state_basis.size
        self.grids = []
        self.bases = []
        for k in range(len(problem.unknowns)):
            L2 = lt.directions[d + k]
            lt_k = ParameterizedLiouvillian(lt.base, lt.directions[:d] + (L2,),
                                            point[list(range(d)) + [d + k]], (), lt.trace_vector,
                                            lt.hilbert_dim)
            grid = delta_layer(F, theta_grid, self.theta_lt.directions, L2)
            self.grids.append(grid)
            _, layer = _split_grid(grid)
            ob = orthonormalize([layer[i] for i in sorted(layer, key=lambda i: (sum(i), i))],
                                DEDUP_TOL, start=self.state_basis.Q)
            self.bases.append(basis_from_columns(ob.columns, lt_k, problem.b))

    def evaluate(self, eps):
        return vpt_solve(self.state_basis, eps, self.problem.tolerance)

    def derivative(self, k, eps, state, estimator):
        if estimator == 'reduced':
            return state_derivative_reduced(self.bases[k], eps)
        if estimator == 'fixed':
            c = fixed_coefficients(self.grids[k], state, eps)
            return state_derivative_fixed(self.grids[k], eps, c)
        raise ValueError(f'unknown estimator {estimator!r}')


def evaluate(problem, phi, gradient=True, estimator='reduced', keep_derivatives=False):
    """Cost, gradient and model values at ``phi``; re-baselines from scratch.

    Coverage failures give an infinite cost with ``confident=False``.
    """
    phi = np.asarray(phi, dtype=float)
    params = problem.params_at(phi)
    family = ModelFamily(problem.builder, params, problem.theta_names + problem.unknowns)
    op = family.operators[problem.observable.operator]
    o_row = vec_of_transpose(op)
    pvals = {f.name: getattr(params, f.name) for f in params.__dataclass_fields__.values()}
    factor = problem.observable.factor(pvals)
    dfactor = np.array([problem.observable.factor_derivative(pvals, n) for n in problem.unknowns])
    plan = problem.plan()
    pts = plan.points()
    n = plan.n_points
    rng = np.random.default_rng(plan.rng_seed)
    covered = np.zeros(n, dtype=bool)
    traces = np.zeros(n, dtype=complex)
    dtraces = np.zeros((n, len(problem.unknowns)), dtype=complex)
    residuals = np.full(n, np.inf)
    derivs = {}
    n_base = 0
    try:
        while not covered.all():
            remaining = np.flatnonzero(~covered)
            base_index = int(remaining[rng.integers(len(remaining))])
            region = _FitRegion(problem, family, pts[base_index], phi)
            n_base += 1
            sols = {base_index: region.evaluate(np.zeros(len(problem.theta)))}
            if not sols[base_index].converged:
                raise LindVPTError(f'theta point {pts[base_index]} fails as its own base')
            sols.update(grow_region(plan, region.theta_lt, region, base_index, covered, pts))
            for j, sol in sols.items():
                covered[j] = True
                residuals[j] = sol.residual
                traces[j] = o_row @ sol.state.data
                if gradient:
                    eps = pts[j] - pts[base_index]
                    ds = [region.derivative(k, eps, sol.state, estimator)
                          for k in range(len(problem.unknowns))]
                    dtraces[j] = [o_row @ d.data for d in ds]
                    if keep_derivatives:
                        derivs[j] = ds
    except LindVPTError as exc:
        warnings.warn(f'cost evaluation failed at phi={phi}: {exc}', RuntimeWarning, stacklevel=2)
        k = len(problem.unknowns)
        return CostReport(np.inf, GradientReport(np.zeros(k), estimator), np.full(n, np.nan),
                          residuals, n_base, False)
    values = problem.observable.offset + factor * traces
    delta_o = values - problem.data
    cost = float(np.sum(np.abs(delta_o) ** 2))
    grad = np.zeros(len(problem.unknowns))
    if gradient:
        do = factor * dtraces + traces[:, None] * dfactor[None, :]
        grad = 2.0 * np.real(np.conj(delta_o)[:, None] * do).sum(axis=0)
    return CostReport(cost, GradientReport(grad, estimator, derivs), values, residuals, n_base)


def cost_and_gradient(problem, phi, estimator='reduced'):
    """``C(phi) = sum_theta |<o> - o_exp|^2`` and its gradient."""
    rep = evaluate(problem, phi, True, estimator)
    return rep.cost, rep.gradient.gradient


# ------------------------------------------------------------ optimizer ----

@dataclass(frozen=True)
class FitSettings:
    max_iterations: int = 30
    memory: int = 10
    gtol: float = 1e-8
    ftol: float = 1e-12
    estimator: str = 'reduced'


@dataclass
class FitResult:
    phi: np.ndarray
    cost: float
    trace: list
    n_evaluations: int
    converged: bool
    max_iterations_exceeded: bool
    message: str = ''
    wall_time: float = 0.0


def fit(problem, settings=FitSettings()):
    """Bounded L-BFGS on ``cost_and_gradient``.

    The unknowns are rescaled to ``[0, 1]`` by their bounds.  The returned
    trace holds ``(iteration, phi, cost)`` starting with the initial guess.
    When the iteration budget runs out the best point found is returned with
    ``max_iterations_exceeded`` set.
    """
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    span = np.where(hi > lo, hi - lo, 1.0)
    to_phi = lambda x: lo + span * x
    cache = {}
    best = {'cost': np.inf, 'phi': problem.initial.copy()}
    n_eval = [0]

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            phi = to_phi(x)
            rep = evaluate(problem, phi, True, settings.estimator)
            n_eval[0] += 1
            cache.clear()
            cache[key] = (rep.cost, rep.gradient.gradient * span)
            if rep.cost < best['cost']:
                best.update(cost=rep.cost, phi=phi.copy())
        return cache[key]

    x0 = (problem.initial - lo) / span
    c0, _ = fun(x0)
    trace = [(0, problem.initial.copy(), c0)]

    def callback(xk):
        c, _ = fun(xk)
        trace.append((len(trace), to_phi(xk).copy(), c))

    t0 = time.perf_counter()
    res = minimize(fun, x0, jac=True, method='L-BFGS-B', bounds=[(0.0, 1.0)] * len(x0),
                   callback=callback,
                   options={'maxiter': settings.max_iterations, 'maxcor': settings.memory,
                            'gtol': settings.gtol, 'ftol': settings.ftol})
    phi = to_phi(res.x)
    cost = float(res.fun)
    if best['cost'] < cost:
        phi, cost = best['phi'], best['cost']
    exceeded = res.nit >= settings.max_iterations and not res.success
    return FitResult(phi, cost, trace, n_eval[0], bool(res.success), bool(exceeded),
                     str(res.message), time.perf_counter() - t0)


# ---------------------------------------------------------------- data -----

def exact_observable_values(builder, params, theta, observable):
    """Observable on the ``theta`` grid from one LU solve per point."""
    plan = SweepPlan(theta, 'lu')
    names = plan.names
    out = np.zeros(plan.n_points, dtype=complex)
    for i, pt in enumerate(plan.points()):
        p = replace(params, **dict(zip(names, map(float, pt))))
        built = builder(p)
        rho, _ = steady_state_lu(built.parameterized(()).trace_modified())
        pv = {f: getattr(p, f) for f in p.__dataclass_fields__}
        out[i] = observable.value(expectation(rho, built.operators[observable.operator]), pv)
    return out


def generate_data(builder, params, theta, observable, sigma=0.02, seed=0):
    """Exact values plus independent Gaussian noise on real and imaginary parts.

    Returns ``(data, exact)``.
    """
    exact = exact_observable_values(builder, params, theta, observable)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, exact.shape) + 1j * rng.normal(0.0, sigma, exact.shape)
    return exact + noise, exact
