import json
import subprocess
import sys

import numpy as np
import pytest

from lindvpt import __version__
from lindvpt.cli import load_config, main
from lindvpt.errors import ConfigError

KERR_SWEEP = {
    'model': {'name': 'kerr', 'params': {'K': 0.5, 'F': 1.0, 'kappa': 1.0, 'n_max': 8}},
    'seed': 3,
    'observables': {'n': 'adag * a', 'a': 'a'},
    'sweep': {'axes': [{'name': 'delta', 'min': -2.0, 'max': 1.0, 'points': 7},
                       {'name': 'F', 'min': 0.5, 'max': 1.5, 'points': 3}],
              'strategy': 'vpt', 'orders': [4, 4], 'tolerance': 1e-8},
}


def _write(tmp_path, cfg, name='cfg.json'):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


def _run(tmp_path, command, cfg, *extra, environ=None):
    out = tmp_path / 'out'
    rc = main([command, '--config', _write(tmp_path, cfg), '--out', str(out), *extra],
              environ=environ or {})
    return rc, out


@pytest.mark.parametrize('strategy', ['lu', 'pt', 'vpt', 'mvpt', 'krylov'])
def test_sweep_writes_outputs(tmp_path, strategy):
    rc, out = _run(tmp_path, 'sweep', KERR_SWEEP, '--strategy', strategy)
    assert rc == 0
    lines = (out / 'sweep.csv').read_text().splitlines()
    assert lines[0].startswith('# version=' + __version__)
    assert len(lines) == 2 + 21
    meta = json.loads((out / 'sweep.json').read_text())
    assert meta['seed'] == 3
    assert (out / 'sweep.timing.json').exists()


def test_sweep_outputs_are_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        (tmp_path / str(k)).mkdir()
        rc, out = _run(tmp_path / str(k), 'sweep', KERR_SWEEP)
        assert rc == 0
        outs.append(((out / 'sweep.csv').read_bytes(), (out / 'sweep.json').read_bytes()))
    assert outs[0] == outs[1]


def test_flag_beats_environment_beats_config(tmp_path):
    rc, out = _run(tmp_path, 'sweep', KERR_SWEEP, environ={'LINDVPT_SEED': '11'})
    assert rc == 0 and json.loads((out / 'sweep.json').read_text())['seed'] == 11
    rc, out = _run(tmp_path, 'sweep', KERR_SWEEP, '--seed', '5', environ={'LINDVPT_SEED': '11'})
    assert rc == 0 and json.loads((out / 'sweep.json').read_text())['seed'] == 5
    cfg = _write(tmp_path, KERR_SWEEP, 'env.json')
    rc = main(['sweep', '--out', str(tmp_path / 'e')], environ={'LINDVPT_CONFIG': cfg})
    assert rc == 0 and (tmp_path / 'e' / 'sweep.csv').exists()


def test_config_errors_exit_2_with_line_numbers(tmp_path, capsys):
    bad = json.loads(json.dumps(KERR_SWEEP))
    bad['sweep']['strategy'] = 'magic'
    rc, _ = _run(tmp_path, 'sweep', bad)
    assert rc == 2
    err = capsys.readouterr().err
    path = tmp_path / 'cfg.json'
    line = next(i + 1 for i, s in enumerate(path.read_text().splitlines()) if '"strategy"' in s)
    assert f'cfg.json:{line}: sweep/strategy' in err
    with pytest.raises(ConfigError, match=r':3: invalid JSON'):
        p = tmp_path / 'broken.json'
        p.write_text('{\n  "model": {"name": "kerr"},\n  oops\n}')
        load_config(p)


@pytest.mark.parametrize('mutate', [
    lambda c: c['model']['params'].update(n_levels=5),
    lambda c: c['sweep'].update(tolerance=-1),
    lambda c: c.update(unknown_section={}),
    lambda c: c['observables'].update(bad='adag + 1'),
])
def test_invalid_configs(tmp_path, mutate):
    cfg = json.loads(json.dumps(KERR_SWEEP))
    mutate(cfg)
    assert _run(tmp_path, 'sweep', cfg)[0] == 2


def test_invalid_flag_values(tmp_path):
    assert _run(tmp_path, 'sweep', KERR_SWEEP, '--tol', '0')[0] == 2
    assert _run(tmp_path, 'sweep', KERR_SWEEP, environ={'LINDVPT_SEED': 'x'})[0] == 2
    assert main(['sweep'], environ={}) == 2


def test_non_convergence_exits_4(tmp_path):
    assert _run(tmp_path, 'sweep', KERR_SWEEP, '--tol', '1e-30')[0] == 4


def test_numerical_failure_exits_3(tmp_path):
    cfg = {'model': {'name': 'cat2mode', 'params': {'F': 0.0, 'n_a': 3, 'n_b': 2}},
           'generate': {'theta': [{'name': 'delta_a', 'min': 0, 'max': 1, 'points': 2}],
                        'observable': 'S21'}}
    assert _run(tmp_path, 'generate-data', cfg)[0] == 3


def test_generate_then_fit(tmp_path):
    theta = [{'name': 'delta', 'min': -1.0, 'max': 1.0, 'points': 9}]
    gen = {'model': {'name': 'two_level', 'params': {'omega': 0.4, 'kappa': 1.0}},
           'seed': 1, 'generate': {'theta': theta, 'observable': 'sigma_minus', 'sigma': 0.0}}
    rc, out = _run(tmp_path, 'generate-data', gen)
    assert rc == 0
    rows = np.loadtxt(out / 'dataset.csv', delimiter=',', skiprows=2)
    assert rows.shape[0] == 9
    cfg = {'model': {'name': 'two_level', 'params': {'omega': 0.4, 'kappa': 1.0}}, 'seed': 1,
           'fit': {'dataset': str(out / 'dataset.csv'), 'theta': theta,
                   'unknowns': [{'name': 'omega', 'initial': 0.7, 'bounds': [0.1, 1.0]}],
                   'observable': 'sigma_minus', 'orders': [4], 'tolerance': 1e-10,
                   'max_iterations': 20}}
    fit_dir = tmp_path / 'fit'
    rc = main(['fit', '--config', _write(tmp_path, cfg, 'fit.json'), '--out', str(fit_dir)],
              environ={})
    assert rc == 0
    trace = json.loads((fit_dir / 'fit_trace.json').read_text())
    assert abs(trace['result']['phi'][0] - 0.4) < 1e-5
    assert trace['trace'][0]['iteration'] == 0
    assert (fit_dir / 'fit_comparison.csv').read_text().startswith('# version=')


def test_missing_dataset_is_config_error(tmp_path):
    cfg = {'model': {'name': 'two_level'},
           'fit': {'dataset': 'nope.csv',
                   'theta': [{'name': 'delta', 'min': -1, 'max': 1, 'points': 3}],
                   'unknowns': [{'name': 'omega', 'initial': 0.5, 'bounds': [0.1, 1]}],
                   'observable': 'sigma_minus'}}
    assert _run(tmp_path, 'fit', cfg)[0] == 2


def test_svd_analysis_and_bench(tmp_path):
    cfg = dict(KERR_SWEEP, svd={'n_regions': 2, 'orders': [2, 3], 'strategies': ['vpt']},
               bench={'strategies': ['lu', 'vpt']})
    rc, out = _run(tmp_path, 'svd-analysis', cfg)
    assert rc == 0
    lines = (out / 'svd.csv').read_text().splitlines()
    assert lines[1].startswith('strategy,order') and len(lines) == 2 + 4
    rc, out = _run(tmp_path, 'bench', cfg)
    assert rc == 0
    assert len((out / 'bench.csv').read_text().splitlines()) == 2 + 2


def test_module_entry_point_and_version():
    r = subprocess.run([sys.executable, '-m', 'lindvpt', '--version'], capture_output=True,
                       text=True)
    assert r.returncode == 0 and __version__ in r.stdout
    r = subprocess.run([sys.executable, '-m', 'lindvpt', 'nonsense'], capture_output=True,
                       text=True)
    assert r.returncode == 2


def _two_level_generate(points, sigma, seed=4):
    return {'model': {'name': 'two_level', 'params': {'omega': 0.4}}, 'seed': seed,
            'generate': {'theta': [{'name': 'delta', 'min': -2, 'max': 2, 'points': points}],
                         'observable': 'sigma_minus', 'sigma': sigma}}


def test_generated_noise_statistics(tmp_path):
    rc, out = _run(tmp_path, 'generate-data', _two_level_generate(1000, 0.02))
    assert rc == 0
    rows = np.loadtxt(out / 'dataset.csv', delimiter=',', skiprows=2)
    noise = np.r_[rows[:, 1] - rows[:, 3], rows[:, 2] - rows[:, 4]]
    assert abs(noise.std() / 0.02 - 1) < 0.1


def test_generate_without_noise_and_reproducibility(tmp_path):
    rc, out = _run(tmp_path, 'generate-data', _two_level_generate(5, 0.0))
    rows = np.loadtxt(out / 'dataset.csv', delimiter=',', skiprows=2)
    assert rc == 0 and np.array_equal(rows[:, 1:3], rows[:, 3:5])
    texts = []
    for k in range(2):
        (tmp_path / f'r{k}').mkdir()
        rc, out = _run(tmp_path / f'r{k}', 'generate-data', _two_level_generate(5, 0.02))
        texts.append((out / 'dataset.csv').read_bytes())
    assert texts[0] == texts[1]


def test_every_output_carries_provenance(tmp_path):
    cfg = dict(KERR_SWEEP, svd={'n_regions': 1, 'orders': [2]}, bench={'strategies': ['lu']})
    for cmd in ('sweep', 'svd-analysis', 'bench'):
        assert _run(tmp_path, cmd, cfg)[0] == 0
    out = tmp_path / 'out'
    for f in sorted(out.iterdir()):
        text = f.read_text()
        assert 'config_hash' in text and 'seed' in text and __version__ in text, f.name


def test_sector_sweep_matches_full_space(tmp_path):
    cfg = {'model': {'name': 'xyz', 'params': {'Lx': 2, 'Ly': 2}}, 'seed': 0,
           'observables': {'mz': 'mz', 'sz0': 'sigma_z_0', 'sz3': 'sigma_z_3'},
           'sweep': {'axes': [{'name': 'Jy', 'min': 0.8, 'max': 1.4, 'points': 4}],
                     'strategy': 'vpt', 'orders': [4], 'tolerance': 1e-9}}
    (tmp_path / 'a').mkdir()
    (tmp_path / 'b').mkdir()
    rc, full = _run(tmp_path / 'a', 'sweep', cfg)
    cfg['sweep']['sector'] = True
    rc2, sect = _run(tmp_path / 'b', 'sweep', cfg)
    assert rc == rc2 == 0
    a = np.loadtxt(full / 'sweep.csv', delimiter=',', skiprows=2, usecols=range(1, 7))
    b = np.loadtxt(sect / 'sweep.csv', delimiter=',', skiprows=2, usecols=range(1, 7))
    assert np.allclose(a, b, atol=1e-8)
    assert np.allclose(b[:, 2], b[:, 4], atol=1e-9)
    cfg['model'] = {'name': 'two_level'}
    cfg['sweep']['axes'][0]['name'] = 'delta'
    cfg.pop('observables')
    assert _run(tmp_path, 'sweep', cfg)[0] == 2
