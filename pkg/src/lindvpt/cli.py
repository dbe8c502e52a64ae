"""
Command-line entry point.

    lindvpt --config run.json --out results/ sweep
    lindvpt --config fit.json --out results/ --seed 3 fit

Every flag has an environment override ``LINDVPT_<FLAG>`` (for example
``LINDVPT_SEED``); explicit flags win over the environment, which wins over
the config file.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 non-convergence.
"""

import argparse
import csv
import hashlib
import json
import os
from pathlib import Path
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .coverage import Axis, SweepPlan, compression_study, cover
from .errors import ConfigError, IterativeNonConvergence, LindVPTError, NonConvergentPoint
from .expressions import operator_expression, scalar_expression
from .gradfit import (AffineObservable, FitProblem, FitSettings, evaluate, fit,
                      generate_data, s21_observable)
from .krylov import IterativeSettings, SectorFamily
from .models import MODELS, ModelFamily

__all__ = ['main', 'load_config', 'CONFIG_SCHEMA']

ENV_PREFIX = 'LINDVPT_'
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NONCONVERGENCE = 0, 2, 3, 4
COMMANDS = ('sweep', 'fit', 'svd-analysis', 'bench', 'generate-data')

_AXIS = {
    'type': 'object',
    'required': ['name', 'min', 'max', 'points'],
    'properties': {'name': {'type': 'string'}, 'min': {'type': 'number'},
                   'max': {'type': 'number'}, 'points': {'type': 'integer', 'minimum': 1}},
    'additionalProperties': False,
}
_OBSERVABLE = {
    'oneOf': [
        {'type': 'string'},
        {'type': 'object', 'required': ['operator'],
         'properties': {'operator': {'type': 'string'},
                        'offset': {'type': ['number', 'string']},
                        'scale': {'type': ['number', 'string']}},
         'additionalProperties': False},
    ]
}
_ORDERS = {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}, 'minItems': 1}

CONFIG_SCHEMA = {
    'type': 'object',
    'required': ['model'],
    'properties': {
        'model': {
            'type': 'object', 'required': ['name'],
            'properties': {'name': {'enum': sorted(MODELS)}, 'params': {'type': 'object'}},
            'additionalProperties': False,
        },
        'seed': {'type': 'integer', 'minimum': 0},
        'observables': {'type': 'object', 'additionalProperties': {'type': 'string'}},
        'sweep': {
            'type': 'object', 'required': ['axes'],
            'properties': {
                'axes': {'type': 'array', 'items': _AXIS, 'minItems': 1},
                'strategy': {'enum': ['lu', 'pt', 'vpt', 'mvpt', 'krylov']},
                'orders': _ORDERS,
                'tolerance': {'type': 'number', 'exclusiveMinimum': 0},
                'n_nearest': {'type': 'integer', 'minimum': 0},
                'krylov': {'type': 'object'},
                'sector': {'type': 'boolean'},
            },
            'additionalProperties': False,
        },
        'fit': {
            'type': 'object', 'required': ['dataset', 'theta', 'unknowns', 'observable'],
            'properties': {
                'dataset': {'type': 'string'},
                'theta': {'type': 'array', 'items': _AXIS, 'minItems': 1},
                'unknowns': {'type': 'array', 'minItems': 1, 'items': {
                    'type': 'object', 'required': ['name', 'bounds'],
                    'properties': {'name': {'type': 'string'},
                                   'initial': {'type': 'number'},
                                   'bounds': {'type': 'array', 'items': {'type': 'number'},
                                              'minItems': 2, 'maxItems': 2}},
                    'additionalProperties': False}},
                'random_initial': {'type': 'object', 'properties': {
                    'center': {'type': 'object'}, 'spread': {'type': 'number', 'minimum': 0}},
                    'additionalProperties': False},
                'observable': _OBSERVABLE,
                'orders': _ORDERS,
                'tolerance': {'type': 'number', 'exclusiveMinimum': 0},
                'max_iterations': {'type': 'integer', 'minimum': 1},
                'estimator': {'enum': ['reduced', 'fixed']},
            },
            'additionalProperties': False,
        },
        'generate': {
            'type': 'object', 'required': ['theta', 'observable'],
            'properties': {
                'theta': {'type': 'array', 'items': _AXIS, 'minItems': 1},
                'observable': _OBSERVABLE,
                'sigma': {'type': 'number', 'minimum': 0},
            },
            'additionalProperties': False,
        },
        'svd': {
            'type': 'object',
            'properties': {'n_regions': {'type': 'integer', 'minimum': 1},
                           'orders': {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}},
                           'strategies': {'type': 'array', 'items': {'enum': ['pt', 'vpt']}}},
            'additionalProperties': False,
        },
        'bench': {
            'type': 'object',
            'properties': {'strategies': {'type': 'array', 'items': {
                'enum': ['lu', 'pt', 'vpt', 'mvpt', 'krylov']}}},
            'additionalProperties': False,
        },
    },
    'additionalProperties': False,
}


class RunConfig:
    """Validated configuration plus resolved flag values."""

    def __init__(self, data, text, path, out, seed, threads, strategy, tol):
        self.data = data
        self.text = text
        self.path = path
        self.out = Path(out)
        self.seed = int(seed)
        self.threads = int(threads)
        self.strategy = strategy
        self.tol = tol

    @property
    def config_hash(self):
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def provenance(self):
        return {'version': __version__, 'config_hash': self.config_hash, 'seed': self.seed}

    def provenance_line(self):
        return ' '.join(f'{k}={v}' for k, v in self.provenance().items())

    def resolve(self, name):
        """Path from the config, relative to the config file's directory."""
        p = Path(name)
        if not p.is_absolute() and self.path is not None:
            p = Path(self.path).parent / p
        if not p.exists():
            raise ConfigError(f'referenced file {str(p)!r} does not exist')
        return p


def _line_of(text, path):
    """Best-effort line number of a JSON path inside ``text``."""
    pos = 0
    for key in path:
        if isinstance(key, str):
            j = text.find(f'"{key}"', pos)
            if j < 0:
                break
            pos = j
    return text.count('\n', 0, pos) + 1


def load_config(path):
    """Parse and validate a JSON config; errors carry line numbers."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f'cannot read config {path}: {exc}') from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path}:{exc.lineno}: invalid JSON: {exc.msg}') from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(k) for k in e.absolute_path])
    if errors:
        msgs = [f'{path}:{_line_of(text, list(e.absolute_path))}: '
                f'{"/".join(map(str, e.absolute_path)) or "<root>"}: {e.message}' for e in errors]
        raise ConfigError('\n'.join(msgs))
    return data, text


# ----------------------------------------------------------------- model ---

def _params(data):
    name = data['model']['name']
    cls, builder = MODELS[name]
    fields = cls.__dataclass_fields__
    given = data['model'].get('params', {})
    unknown = sorted(set(given) - set(fields))
    if unknown:
        raise ConfigError(f'unknown parameters for model {name!r}: {unknown}')
    try:
        return cls(**given), builder
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'invalid parameters for model {name!r}: {exc}') from exc


def _observables(data, built):
    params = {k: getattr(built.params, k) for k in built.params.__dataclass_fields__}
    spec = data.get('observables')
    if spec is None:
        return {k: v for k, v in built.operators.items() if not isinstance(v, list)}
    return {name: operator_expression(expr, _flat_ops(built.operators), params)
            for name, expr in spec.items()}


def _flat_ops(ops):
    out = {}
    for k, v in ops.items():
        if isinstance(v, list):
            for i, o in enumerate(v):
                out[f'{k}_{i}'] = o
        else:
            out[k] = v
    return out


def _affine_observable(spec):
    if isinstance(spec, str):
        if spec.lower() == 's21':
            return s21_observable()
        return AffineObservable(spec)
    offset = spec.get('offset', 0.0)
    scale = spec.get('scale')
    off = complex(scalar_expression(offset, {})) if isinstance(offset, str) else complex(offset)
    if scale is None:
        return AffineObservable(spec['operator'], off)
    if not isinstance(scale, str):
        return AffineObservable(spec['operator'], off, lambda p, s=complex(scale): s)
    f = lambda p: scalar_expression(scale, p)

    def grad(p, h=1e-7):
        out = {}
        for k, v in p.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                step = h * max(1.0, abs(v))
                hi = dict(p, **{k: v + step})
                lo = dict(p, **{k: v - step})
                try:
                    d = (f(hi) - f(lo)) / (2 * step)
                except (ZeroDivisionError, ConfigError):
                    continue
                if d != 0:
                    out[k] = d
        return out

    return AffineObservable(spec['operator'], off, f, grad)


def _axes(items):
    return tuple(Axis(a['name'], float(a['min']), float(a['max']), int(a['points']))
                 for a in items)


def _plan(cfg, strategy=None):
    sw = cfg.data.get('sweep')
    if sw is None:
        raise ConfigError('config has no "sweep" section')
    axes = _axes(sw['axes'])
    strategy = strategy or cfg.strategy or sw.get('strategy', 'vpt')
    tol = cfg.tol if cfg.tol is not None else sw.get('tolerance', 1e-7)
    orders = sw.get('orders', [10] * len(axes))
    if len(orders) not in (1, len(axes)):
        raise ConfigError('"orders" needs one entry per axis')
    try:
        return SweepPlan(axes, strategy, tuple(orders), float(tol), cfg.seed,
                         sw.get('n_nearest', 2), krylov=IterativeSettings(**sw.get('krylov', {})))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _family(cfg, axes):
    params, builder = _params(cfg.data)
    try:
        return ModelFamily(builder, params, [a.name for a in axes])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


# -------------------------------------------------------------- commands ---

def _write_json(path, obj):
    with open(path, 'w') as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write('\n')


def _fmt(x):
    return format(float(x), '.17g')


def cmd_sweep(cfg):
    plan = _plan(cfg)
    family = _family(cfg, plan.axes)
    obs = _observables(cfg.data, family.prototype)
    if cfg.data['sweep'].get('sector', False):
        # solve in the trivial symmetry sector; observables act on sector vectors
        if not family.prototype.symmetries:
            raise ConfigError(f'model {cfg.data["model"]["name"]!r} declares no symmetries')
        family = SectorFamily(family)
        obs = {k: family.observable(v) for k, v in obs.items()}
    meta = dict(cfg.provenance(), provenance=cfg.provenance_line(),
                model=cfg.data['model']['name'])
    diagram, regions = cover(plan, family, obs, threads=cfg.threads, metadata=meta)
    diagram.timing = dict(diagram.timing, **cfg.provenance())
    cfg.out.mkdir(parents=True, exist_ok=True)
    diagram.write(cfg.out / 'sweep.csv', cfg.out / 'sweep.json', regions,
                  cfg.out / 'sweep.timing.json')
    return EXIT_OK


def _read_dataset(path, theta):
    rows = []
    with open(path, newline='') as fh:
        lines = [ln for ln in fh if not ln.startswith('#')]
    reader = csv.DictReader(lines)
    for r in reader:
        rows.append(r)
    plan = SweepPlan(theta, 'lu')
    if len(rows) != plan.n_points:
        raise ConfigError(f'dataset {path} has {len(rows)} rows, theta grid needs {plan.n_points}')
    pts = plan.points()
    data = np.zeros(plan.n_points, dtype=complex)
    for i, r in enumerate(rows):
        try:
            got = np.array([float(r[n]) for n in plan.names])
            data[i] = complex(float(r['value_re']), float(r['value_im']))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f'dataset {path} row {i + 2}: {exc}') from exc
        if not np.allclose(got, pts[i], rtol=1e-12, atol=1e-12):
            raise ConfigError(f'dataset {path} row {i + 2} is not on the theta grid')
    return data


def cmd_generate_data(cfg):
    gen = cfg.data.get('generate')
    if gen is None:
        raise ConfigError('config has no "generate" section')
    params, builder = _params(cfg.data)
    theta = _axes(gen['theta'])
    obs = _affine_observable(gen['observable'])
    sigma = float(gen.get('sigma', 0.02))
    data, exact = generate_data(builder, params, theta, obs, sigma, cfg.seed)
    pts = SweepPlan(theta, 'lu').points()
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / 'dataset.csv', 'w', newline='') as fh:
        fh.write('# ' + cfg.provenance_line() + f' sigma={sigma!r}\n')
        w = csv.writer(fh, lineterminator='\n')
        w.writerow([a.name for a in theta] + ['value_re', 'value_im', 'exact_re', 'exact_im'])
        for p, d, e in zip(pts, data, exact):
            w.writerow([_fmt(v) for v in p] + [_fmt(d.real), _fmt(d.imag),
                                                _fmt(e.real), _fmt(e.imag)])
    return EXIT_OK


def _initial_guess(spec, unknowns, seed):
    names = [u['name'] for u in unknowns]
    bounds = np.array([u['bounds'] for u in unknowns], dtype=float)
    ri = spec.get('random_initial')
    if ri is not None:
        center = ri.get('center', {})
        missing = [n for n in names if n not in center]
        if missing:
            raise ConfigError(f'random_initial.center lacks {missing}')
        c = np.array([center[n] for n in names], dtype=float)
        rng = np.random.default_rng(seed)
        x = c * (1.0 + rng.uniform(-ri.get('spread', 0.5), ri.get('spread', 0.5), len(c)))
        return np.clip(x, bounds[:, 0], bounds[:, 1]), bounds
    if any('initial' not in u for u in unknowns):
        raise ConfigError('every unknown needs "initial" unless random_initial is given')
    return np.array([u['initial'] for u in unknowns], dtype=float), bounds


def cmd_fit(cfg):
    spec = cfg.data.get('fit')
    if spec is None:
        raise ConfigError('config has no "fit" section')
    params, builder = _params(cfg.data)
    theta = _axes(spec['theta'])
    data = _read_dataset(cfg.resolve(spec['dataset']), theta)
    init, bounds = _initial_guess(spec, spec['unknowns'], cfg.seed)
    names = tuple(u['name'] for u in spec['unknowns'])
    tol = cfg.tol if cfg.tol is not None else spec.get('tolerance', 1e-4)
    try:
        problem = FitProblem(builder, params, theta, names, init, bounds, data,
                             _affine_observable(spec['observable']),
                             tuple(spec.get('orders', [8])), float(tol), cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    settings = FitSettings(max_iterations=spec.get('max_iterations', 30),
                           estimator=spec.get('estimator', 'reduced'))
    result = fit(problem, settings)
    final = evaluate(problem, result.phi, gradient=False)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / 'fit_trace.json', {
        **cfg.provenance(),
        'unknowns': list(names),
        'initial': init.tolist(),
        'trace': [{'iteration': int(i), 'phi': [float(v) for v in phi], 'cost': float(c)}
                  for i, phi, c in result.trace],
        'result': {'phi': result.phi.tolist(), 'cost': float(result.cost),
                   'converged': result.converged,
                   'max_iterations_exceeded': result.max_iterations_exceeded,
                   'evaluations': result.n_evaluations},
    })
    pts = problem.plan().points()
    with open(cfg.out / 'fit_comparison.csv', 'w', newline='') as fh:
        fh.write('# ' + cfg.provenance_line() + '\n')
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(list(problem.theta_names) + ['data_re', 'data_im', 'model_re', 'model_im',
                                                'residual'])
        for p, d, m, r in zip(pts, data, final.values, final.residuals):
            w.writerow([_fmt(v) for v in p] + [_fmt(d.real), _fmt(d.imag), _fmt(m.real),
                                                _fmt(m.imag), _fmt(r)])
    return EXIT_OK


def cmd_svd_analysis(cfg):
    plan0 = _plan(cfg)
    family = _family(cfg, plan0.axes)
    spec = cfg.data.get('svd', {})
    n_regions = spec.get('n_regions', 10)
    rng = np.random.default_rng(cfg.seed)
    bases = rng.choice(plan0.n_points, size=min(n_regions, plan0.n_points), replace=False)
    rows = []
    for strategy in spec.get('strategies', ['vpt', 'pt']):
        for m in spec.get('orders', list(plan0.orders[:1])):
            plan = SweepPlan(plan0.axes, strategy, (m,), plan0.tolerance, cfg.seed)
            for r in compression_study(plan, family, bases):
                rows.append(dict(strategy=strategy, order=m, **r))
    cfg.out.mkdir(parents=True, exist_ok=True)
    cols = ['strategy', 'order', 'base_index', 'points', 'area', 'n_vectors', 'basis_size',
            'm_svd', 'ratio']
    with open(cfg.out / 'svd.csv', 'w', newline='') as fh:
        fh.write('# ' + cfg.provenance_line() + '\n')
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return EXIT_OK


def cmd_bench(cfg):
    plan0 = _plan(cfg)
    family = _family(cfg, plan0.axes)
    strategies = cfg.data.get('bench', {}).get('strategies', ['lu', 'pt', 'vpt', 'mvpt', 'krylov'])
    rows = []
    for s in strategies:
        plan = SweepPlan(plan0.axes, s, plan0.orders, plan0.tolerance, cfg.seed,
                         plan0.n_nearest, krylov=plan0.krylov)
        t0 = time.perf_counter()
        diagram, regions = cover(plan, family, {}, threads=cfg.threads)
        wall = time.perf_counter() - t0
        t = diagram.timing
        rows.append([s, len(regions), plan.n_points, _fmt(wall), _fmt(t['lu']),
                     _fmt(t['corrections']), _fmt(t['flood_fill'])])
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / 'bench.csv', 'w', newline='') as fh:
        fh.write('# ' + cfg.provenance_line() + '\n')
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(['strategy', 'base_points', 'grid_points', 'wall_s', 'lu_s',
                    'corrections_s', 'flood_fill_s'])
        w.writerows(rows)
    return EXIT_OK


HANDLERS = {'sweep': cmd_sweep, 'fit': cmd_fit, 'svd-analysis': cmd_svd_analysis,
            'bench': cmd_bench, 'generate-data': cmd_generate_data}


def build_parser():
    p = argparse.ArgumentParser(prog='lindvpt', description=__doc__.split('\n\n')[0].strip())
    p.add_argument('command', choices=COMMANDS)
    p.add_argument('--config', help='JSON run configuration')
    p.add_argument('--out', help='output directory')
    p.add_argument('--seed', type=int, help='random seed (u64)')
    p.add_argument('--threads', type=int, help='worker threads (default 1)')
    p.add_argument('--strategy', choices=['lu', 'pt', 'vpt', 'mvpt', 'krylov'])
    p.add_argument('--tol', type=float, help='residual tolerance')
    p.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    return p


def _env(name, cast, environ):
    v = environ.get(ENV_PREFIX + name.upper())
    if v is None:
        return None
    try:
        return cast(v)
    except ValueError as exc:
        raise ConfigError(f'invalid {ENV_PREFIX + name.upper()}={v!r}') from exc


def main(argv=None, environ=None):
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    try:
        pick = lambda name, cast: (getattr(args, name) if getattr(args, name) is not None
                                   else _env(name, cast, environ))
        config = pick('config', str)
        if config is None:
            raise ConfigError('no config given (--config or LINDVPT_CONFIG)')
        data, text = load_config(config)
        seed = pick('seed', int)
        if seed is None:
            seed = data.get('seed', 0)
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError('seed must be an unsigned 64-bit integer')
        strategy = pick('strategy', str)
        if strategy is not None and strategy not in ('lu', 'pt', 'vpt', 'mvpt', 'krylov'):
            raise ConfigError(f'unknown strategy {strategy!r}')
        tol = pick('tol', float)
        if tol is not None and not tol > 0:
            raise ConfigError('tolerance must be positive')
        threads = pick('threads', int) or 1
        cfg = RunConfig(data, text, config, pick('out', str) or '.', seed, threads, strategy, tol)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f'configuration error: {exc}', file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergentPoint, IterativeNonConvergence) as exc:
        print(f'non-convergence: {exc}', file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (LindVPTError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f'numerical failure: {exc}', file=sys.stderr)
        return EXIT_NUMERICAL


def main_exit():
    sys.exit(main())


if __name__ == '__main__':
    main_exit()
