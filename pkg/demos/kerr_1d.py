"""PT against VPT along the detuning of a strongly driven Kerr resonator.

One LU factorization at delta = 0 yields 20 corrections.  The truncated
series converges only near the base point; the variational solve over the
same vectors also converges in windows far away from it.
"""

import numpy as np

from lindvpt.lindblad import expectation, steady_state_lu
from lindvpt.models import KerrParams, ModelFamily, kerr_exact_observable, kerr_model
from lindvpt.perturbation import build_basis, pt_corrections_grid, standard_pt_eval, vpt_solve


def windows(xs, mask):
    out, start = [], None
    for k, (x, m) in enumerate(zip(xs, mask)):
        if m and start is None:
            start = x
        if not m and start is not None:
            out.append((start, xs[k - 1]))
            start = None
    if start is not None:
        out.append((start, xs[-1]))
    return out


def main():
    fam = ModelFamily(kerr_model, KerrParams(delta=0.0, K=10.0, F=10.0, kappa=1.0, n_max=30),
                      ('delta',))
    lt = fam.at([0.0])
    rho0, lu = steady_state_lu(lt.trace_modified())
    grid = pt_corrections_grid(lu, rho0, lt.directions, (20,))
    basis = build_basis(grid, lt)
    print(f'{len(grid)} corrections, {basis.size} independent directions')
    ds = np.arange(-40.0, 40.001, 0.25)
    pt = np.array([standard_pt_eval(grid, lt, [d], 1e-2).converged for d in ds])
    sols = [vpt_solve(basis, [d], 1e-2) for d in ds]
    vp = np.array([s.converged for s in sols])
    print('PT converged on ', windows(ds, pt))
    print('VPT converged on', windows(ds, vp))
    print(' delta    <n> VPT    <n> exact')
    for d, s in zip(ds, sols):
        if s.converged and d % 5 == 0:
            exact = kerr_exact_observable(fam.params_at([d])).real
            print(f'{d:6.1f} {expectation(s.state, fam.operators["n"]).real:10.5f} {exact:10.5f}')


if __name__ == '__main__':
    main()
