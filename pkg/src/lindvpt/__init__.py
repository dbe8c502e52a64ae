"""Lindblad steady states over parameter regions by LU-reuse perturbation
theory, variational and multipoint-variational expansions, recycled Krylov
spaces and symmetry-sector reduction."""

__version__ = '0.1.0'

from .errors import *  # noqa: F401,F403
from .lindblad import (LindbladModel, DensityVector, ParameterizedLiouvillian,
                       build_liouvillian, trace_modify, steady_state_lu, parameterize,
                       expectation, vec, unvec)
from .perturbation import (CorrectionGrid, PerturbationBasis, VptSolution, pt_corrections_grid,
                           standard_pt_eval, build_basis, vpt_solve, residual_norm)
from .krylov import (IterativeSettings, gmres_solve, build_recycled_space, recycled_solve,
                     symmetric_sector_reduce, sector_liouvillian)
from .coverage import Axis, SweepPlan, PhaseDiagram, cover, svd_optimal_rank
from .gradfit import AffineObservable, FitProblem, FitSettings, fit, cost_and_gradient
from .models import MODELS, ModelFamily
