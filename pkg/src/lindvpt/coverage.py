"""
Adaptive coverage of a parameter grid by convergence regions.

A base point is drawn uniformly from the uncovered grid points, the steady
state and its corrections are computed there by LU, and the region grows
breadth-first over grid neighbours for as long as the chosen approximation
(power series, Galerkin over the corrections, multipoint Galerkin, or a
recycled Krylov space) keeps the residual ``||L(eps) rho||`` below the
tolerance.  The loop repeats until every grid point belongs to a region.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from enum import Enum
import csv
import json
import time

import numpy as np

from .errors import EmptyInput, IterativeNonConvergence, LindVPTError, NonConvergentPoint
from .krylov import (IterativeSettings, build_recycled_space,
                     iterative_steady_state, make_preconditioner, recycled_solve)
from .lindblad import DensityVector, expectation, steady_state_lu
from .perturbation import (VptSolution, build_basis, pt_corrections_grid,
                           standard_pt_eval, vpt_solve)
from .tensor_core import dense_svd

__all__ = [
    'Strategy', 'Axis', 'SweepPlan', 'ConvergenceRegion', 'PhaseDiagram',
    'cover', 'region_stats', 'svd_optimal_rank', 'grow_region',
    'compression_study',
]


class Strategy(str, Enum):
    LU = 'lu'
    PT = 'pt'
    VPT = 'vpt'
    MVPT = 'mvpt'
    KRYLOV = 'krylov'


@dataclass(frozen=True)
class Axis:
    name: str
    min: float
    max: float
    points: int

    def __post_init__(self):
        if self.points < 1:
            raise ValueError(f'axis {self.name!r} needs at least one point')
        if self.points == 1 and self.min != self.max:
            raise ValueError(f'single-point axis {self.name!r} must have min == max')
        if self.points > 1 and not self.max > self.min:
            raise ValueError(f'axis {self.name!r} must have max > min')

    def values(self):
        return np.linspace(self.min, self.max, self.points)

    @property
    def span(self):
        return self.max - self.min


@dataclass(frozen=True)
class SweepPlan:
    """Grid, strategy and tolerances of one sweep.

    The grid is the Cartesian product of the axes, flattened in C order
    (last axis fastest); grid indices below refer to that flattening.
    """
    axes: tuple
    strategy: Strategy = Strategy.VPT
    orders: tuple = (10,)
    tolerance: float = 1e-7
    rng_seed: int = 0
    n_nearest: int = 2
    b: float = 1.0
    krylov: IterativeSettings = IterativeSettings()

    def __post_init__(self):
        axes = tuple(a if isinstance(a, Axis) else Axis(*a) for a in self.axes)
        if not axes:
            raise EmptyInput('a sweep needs at least one axis')
        object.__setattr__(self, 'axes', axes)
        object.__setattr__(self, 'strategy', Strategy(self.strategy))
        orders = tuple(int(m) for m in np.broadcast_to(self.orders, len(axes)))
        object.__setattr__(self, 'orders', orders)
        if not self.tolerance > 0:
            raise ValueError('tolerance must be positive')

    @property
    def shape(self):
        return tuple(a.points for a in self.axes)

    @property
    def n_points(self):
        return int(np.prod(self.shape))

    @property
    def names(self):
        return tuple(a.name for a in self.axes)

    def points(self):
        """``(n_points, d)`` array of parameter values."""
        mesh = np.meshgrid(*[a.values() for a in self.axes], indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=1)

    def normalized(self, pts):
        lo = np.array([a.min for a in self.axes])
        span = np.array([a.span if a.span > 0 else 1.0 for a in self.axes])
        return (np.asarray(pts) - lo) / span

    def cell_volume(self):
        """Grid volume divided by the number of points."""
        return float(np.prod([a.span for a in self.axes if a.points > 1])) / self.n_points

    def neighbours(self, index):
        multi = np.unravel_index(index, self.shape)
        out = []
        for k, n in enumerate(self.shape):
            for step in (-1, 1):
                j = multi[k] + step
                if 0 <= j < n:
                    m = list(multi)
                    m[k] = j
                    out.append(int(np.ravel_multi_index(m, self.shape)))
        return out

    def to_dict(self):
        return {
            'axes': [asdict(a) for a in self.axes],
            'strategy': self.strategy.value,
            'orders': list(self.orders),
            'tolerance': self.tolerance,
            'rng_seed': self.rng_seed,
            'n_nearest': self.n_nearest,
            'b': self.b,
            'krylov': asdict(self.krylov),
        }


@dataclass
class ConvergenceRegion:
    base_index: int
    base_point: np.ndarray
    covered: list
    residuals: dict
    basis_size: int
    iterations: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.covered)


@dataclass
class PhaseDiagram:
    """Per-point results of a sweep plus provenance metadata."""
    plan: SweepPlan
    points: np.ndarray
    observables: dict
    residual: np.ndarray
    base_id: np.ndarray
    iterations: np.ndarray
    metadata: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def strategy(self):
        return self.plan.strategy.value

    def header(self):
        cols = list(self.plan.names)
        for name in self.observables:
            cols += [f'{name}_re', f'{name}_im']
        cols += ['residual', 'base_id', 'strategy']
        if self.plan.strategy == Strategy.KRYLOV:
            cols.append('iterations')
        return cols

    def rows(self):
        fmt = lambda x: format(float(x), '.17g')
        for i in range(len(self.points)):
            row = [fmt(v) for v in self.points[i]]
            for vals in self.observables.values():
                row += [fmt(vals[i].real), fmt(vals[i].imag)]
            row += [fmt(self.residual[i]), str(int(self.base_id[i])), self.strategy]
            if self.plan.strategy == Strategy.KRYLOV:
                row.append(str(int(self.iterations[i])))
            yield row

    def to_csv(self, path):
        """One row per grid point; a ``#`` provenance line leads when the
        metadata carries ``provenance``."""
        with open(path, 'w', newline='') as fh:
            if 'provenance' in self.metadata:
                fh.write('# ' + self.metadata['provenance'] + '\n')
            w = csv.writer(fh, lineterminator='\n')
            w.writerow(self.header())
            w.writerows(self.rows())

    def sidecar(self, regions):
        return {
            'metadata': self.metadata,
            'plan': self.plan.to_dict(),
            'seed': self.plan.rng_seed,
            'base_points': [[int(r.base_index)] + [float(v) for v in r.base_point]
                            for r in regions],
            'region_sizes': [len(r) for r in regions],
            'basis_sizes': [int(r.basis_size) for r in regions],
        }

    def write(self, csv_path, json_path, regions, timing_path=None):
        """CSV, deterministic JSON sidecar and (optionally) wall-clock timings.

        Timings live in their own file so that the CSV and the sidecar are
        byte-identical across runs with the same plan and seed.
        """
        self.to_csv(csv_path)
        with open(json_path, 'w') as fh:
            json.dump(self.sidecar(regions), fh, indent=2, sort_keys=True)
            fh.write('\n')
        if timing_path is not None:
            with open(timing_path, 'w') as fh:
                json.dump(self.timing, fh, indent=2, sort_keys=True)
                fh.write('\n')


# ----------------------------------------------------------------- solvers ---

@dataclass
class _BaseData:
    point: np.ndarray
    grid: object


class _RegionSolver:
    """Approximation valid around one base point: ``evaluate(eps)``."""

    def __init__(self, plan, liouvillian, history, base_state, lu):
        self.plan = plan
        self.lt = liouvillian
        self.base_state = base_state
        strategy = plan.strategy
        self.grid = None
        if strategy in (Strategy.PT, Strategy.VPT, Strategy.MVPT):
            self.grid = pt_corrections_grid(lu, base_state, liouvillian.directions,
                                            plan.orders, base_point=liouvillian.base_point,
                                            trace_vector=liouvillian.trace_vector)
        if strategy == Strategy.PT:
            self.size = len(self.grid)
        elif strategy == Strategy.VPT:
            self.basis = build_basis(self.grid, liouvillian, plan.b)
            self.size = self.basis.size
        elif strategy == Strategy.MVPT:
            others = _nearest(plan, liouvillian.base_point, history)
            self.basis = build_basis([self.grid] + [h.grid for h in others], liouvillian, plan.b)
            self.size = self.basis.size
        elif strategy == Strategy.KRYLOV:
            self.space = build_recycled_space(lu, base_state, liouvillian, plan.orders, plan.b)
            self.size = self.space.size
        else:
            self.size = 1

    def evaluate(self, eps):
        tol = self.plan.tolerance
        s = self.plan.strategy
        if s == Strategy.PT:
            return standard_pt_eval(self.grid, self.lt, eps, tol)
        if s in (Strategy.VPT, Strategy.MVPT):
            return vpt_solve(self.basis, eps, tol)
        if s == Strategy.KRYLOV:
            settings = self.plan.krylov
            # a point needing more than a quarter of the budget is rejected
            # anyway, so the fallback never runs past that
            budget = replace(settings, max_iterations=max(1, settings.max_iterations // 4))
            try:
                sol = recycled_solve(self.space, eps, tol, budget)
            except IterativeNonConvergence:
                return _failed(eps)
            if sol.iterations > 0.25 * settings.max_iterations:
                sol.converged = False
            return sol
        return _failed(eps)


def _failed(eps):
    return VptSolution(None, np.zeros(0), np.inf, np.atleast_1d(eps), False)


def _nearest(plan, point, history):
    if not history or plan.n_nearest <= 0:
        return []
    here = plan.normalized(point)
    dist = [np.linalg.norm(plan.normalized(h.point) - here) for h in history]
    order = np.argsort(dist, kind='stable')[:plan.n_nearest]
    return [history[i] for i in order]


def _base_solve(plan, lt):
    """Steady state at the base point and the factorization reused around it."""
    system = lt.trace_modified(plan.b)
    if plan.strategy == Strategy.KRYLOV:
        settings = plan.krylov
        prec = make_preconditioner(system.matrix, settings)
        try:
            rho, prec, _ = iterative_steady_state(system, settings, preconditioner=prec)
        except IterativeNonConvergence:
            # ILU too weak at this point: fall back to the exact factorization
            rho, prec = steady_state_lu(system)
        return rho, prec
    return steady_state_lu(system)


def grow_region(plan, lt, solver, base_index, covered_mask, pts, executor=None):
    """Breadth-first flood fill from ``base_index`` over uncovered neighbours.

    Returns ``{index: solution}`` for every accepted point.  Points already
    covered by earlier regions are not revisited.
    """
    accepted = {}
    visited = {base_index}
    frontier = [base_index]
    base = lt.base_point
    while frontier:
        candidates = []
        for i in frontier:
            for j in plan.neighbours(i):
                if j not in visited and not covered_mask[j]:
                    visited.add(j)
                    candidates.append(j)
        if not candidates:
            break
        evaluate = lambda j: solver.evaluate(pts[j] - base)
        if executor is None:
            sols = [evaluate(j) for j in candidates]
        else:
            sols = list(executor.map(evaluate, candidates))
        frontier = []
        for j, sol in zip(candidates, sols):
            if sol.converged:
                accepted[j] = sol
                frontier.append(j)
    return accepted


def _observe(observables, rho):
    out = {}
    for name, O in observables.items():
        out[name] = complex(O(rho)) if callable(O) else expectation(rho, O)
    return out


def cover(plan, family, observables=None, threads=1, metadata=None):
    """Cover every grid point of ``plan`` with convergence regions.

    Parameters
    ----------
    plan : SweepPlan
    family : object with ``at(point) -> ParameterizedLiouvillian``
        Re-baselinable parameter family, e.g. :class:`lindvpt.models.ModelFamily`.
        Its directions must be ordered like ``plan.axes``.
    observables : dict name -> sparse operator or callable(DensityVector)
    threads : int
        Worker threads for frontier evaluations; results are identical to
        the serial run.

    Returns
    -------
    (PhaseDiagram, list of ConvergenceRegion)

    Raises
    ------
    NonConvergentPoint
        If a point fails as its own base point.
    """
    observables = observables or {}
    pts = plan.points()
    n = plan.n_points
    rng = np.random.default_rng(plan.rng_seed)
    covered = np.zeros(n, dtype=bool)
    residual = np.full(n, np.nan)
    base_id = np.full(n, -1, dtype=np.int64)
    iterations = np.zeros(n, dtype=np.int64)
    values = {name: np.zeros(n, dtype=complex) for name in observables}
    regions = []
    history = []
    timing = {'lu': 0.0, 'corrections': 0.0, 'flood_fill': 0.0}
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    t_start = time.perf_counter()
    try:
        while not covered.all():
            remaining = np.flatnonzero(~covered)
            base_index = int(remaining[rng.integers(len(remaining))])
            point = pts[base_index]
            t0 = time.perf_counter()
            lt = family.at(point)
            try:
                rho0, factor = _base_solve(plan, lt)
            except LindVPTError as exc:
                raise NonConvergentPoint(f'base solve failed at {point}: {exc}',
                                         base_index, np.inf) from exc
            t1 = time.perf_counter()
            solver = _RegionSolver(plan, lt, history, rho0, factor)
            t2 = time.perf_counter()
            res0 = float(np.linalg.norm(lt.base @ rho0.data))
            if not res0 <= plan.tolerance:
                raise NonConvergentPoint(
                    f'point {point} fails as its own base point (residual {res0:.3e})',
                    base_index, res0)
            sols = {base_index: VptSolution(rho0, np.ones(1), res0, np.zeros(len(point)), True)}
            if plan.strategy != Strategy.LU:
                sols.update(grow_region(plan, lt, solver, base_index, covered, pts, executor))
            t3 = time.perf_counter()
            timing['lu'] += t1 - t0
            timing['corrections'] += t2 - t1
            timing['flood_fill'] += t3 - t2
            rid = len(regions)
            for j in sorted(sols):
                sol = sols[j]
                covered[j] = True
                residual[j] = sol.residual
                base_id[j] = rid
                iterations[j] = getattr(sol, 'iterations', 0)
                for name, v in _observe(observables, sol.state).items():
                    values[name][j] = v
            regions.append(ConvergenceRegion(
                base_index, point.copy(), sorted(sols),
                {j: sols[j].residual for j in sorted(sols)}, solver.size,
                {j: getattr(sols[j], 'iterations', 0) for j in sorted(sols)}))
            if solver.grid is not None:
                history.append(_BaseData(point.copy(), solver.grid))
    finally:
        if executor is not None:
            executor.shutdown()
    timing['total'] = time.perf_counter() - t_start
    meta = {'tolerance': plan.tolerance, 'seed': plan.rng_seed,
            'strategy': plan.strategy.value, 'n_base_points': len(regions)}
    meta.update(metadata or {})
    diagram = PhaseDiagram(plan, pts, values, residual, base_id, iterations, meta, timing)
    return diagram, regions


def region_stats(regions, plan):
    """Per-region area (point count times cell volume) and basis size."""
    cell = plan.cell_volume()
    return [{'region': k, 'base_index': int(r.base_index), 'points': len(r.covered),
             'area': len(r.covered) * cell, 'basis_size': int(r.basis_size)}
            for k, r in enumerate(regions)]


def svd_optimal_rank(states, liouvillians, target_accuracy, trace_vector=None):
    """Smallest rank of a truncated-SVD basis reproducing every state.

    Parameters
    ----------
    states : sequence of DensityVector or 2-D array (columns are states)
    liouvillians : sequence of callables ``x -> L(eps_k) x`` or sparse matrices,
        one per state
    target_accuracy : float
        Residual ``||L(eps_k) rho_k||`` every reconstructed state must meet.

    Notes
    -----
    Each state is projected on the leading left singular vectors and then
    renormalized to unit trace.  The rank is found by bisection, which
    assumes that accuracy does not degrade as the rank grows; the returned
    rank is always checked directly.
    """
    if isinstance(states, np.ndarray) and states.ndim == 2:
        S = np.asarray(states, dtype=complex)
    else:
        S = np.column_stack([s.data if isinstance(s, DensityVector) else s for s in states])
    if S.shape[1] == 0:
        raise EmptyInput('no states supplied')
    if len(liouvillians) != S.shape[1]:
        raise ValueError('one Liouvillian per state is required')
    ops = [L if callable(L) else (lambda x, L=L: L @ x) for L in liouvillians]
    if trace_vector is None:
        d = int(round(np.sqrt(S.shape[0])))
        trace_vector = np.zeros(S.shape[0], dtype=complex)
        trace_vector[::d + 1] = 1.0
    U, s, _ = dense_svd(S)
    C = U.conj().T @ S
    tr = trace_vector.conj() @ U

    def ok(r):
        for k, L in enumerate(ops):
            x = U[:, :r] @ C[:r, k]
            N = tr[:r] @ C[:r, k]
            if abs(N) < 1e-14 or np.linalg.norm(L(x / N)) > target_accuracy:
                return False
        return True

    hi = int(np.sum(s > s[0] * 1e-15)) if s[0] > 0 else 1
    hi = max(hi, 1)
    if not ok(hi):
        hi = len(s)
        if not ok(hi):
            return hi
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def compression_study(plan, family, base_indices):
    """Grow one isolated region per base point and compare its basis with
    the optimal truncated-SVD basis of the states it covers.

    Regions are grown on an empty grid (no points pre-covered), so each is
    the full convergence region of its base point.  Returns one dict per
    base point with the region size, the number of perturbation vectors
    ``prod(M_j + 1)``, the deduplicated basis size and ``M_SVD``.
    """
    pts = plan.points()
    out = []
    for base_index in base_indices:
        point = pts[base_index]
        lt = family.at(point)
        rho0, factor = _base_solve(plan, lt)
        solver = _RegionSolver(plan, lt, [], rho0, factor)
        sols = grow_region(plan, lt, solver, base_index, np.zeros(plan.n_points, bool), pts)
        idx = [base_index] + sorted(sols)
        states = [rho0] + [sols[j].state for j in sorted(sols)]
        ops = [(lambda x, e=pts[j] - point: lt.matvec(e, x)) for j in idx]
        m_svd = svd_optimal_rank(states, ops, plan.tolerance, lt.trace_vector)
        n_vec = int(np.prod([m + 1 for m in plan.orders]))
        out.append({'base_index': int(base_index), 'points': len(idx),
                    'area': len(idx) * plan.cell_volume(), 'n_vectors': n_vec,
                    'basis_size': int(solver.size), 'm_svd': int(m_svd),
                    'ratio': n_vec / m_svd})
    return out
