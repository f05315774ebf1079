"""Stationary patterns of higher-order semilinear ODEs.

patcon computes compactly supported and oscillatory stationary profiles of
``(-1)^{m+1} F^{(2m)} + g_eps(F) = 0`` on ``(-R, R)`` with clamped ends,
traces their branches in the homotopy parameter eps and in the half-length R,
detects saddle-node folds, classifies profiles by crossing multiindex and
fibering critical value, and verifies extinction/blow-up energy bounds by
direct parabolic time integration.
"""

from patcon.model import Family, MultiIndex, Problem, Profile, ZerothSign, g_eval
from patcon.discretize import DiffOperator, Grid, build_operator, eigen_smallest
from patcon.solver import (
    NoConvergence,
    SingularJacobian,
    TemplateSpec,
    fibering_roots,
    newton_solve,
    template_profile,
)
from patcon.continuation import (
    Branch,
    FoldRecord,
    StartNotConverged,
    StepControl,
    bifurcation_points,
    continue_branch,
    detect_folds,
    nonlocal_branch,
)
from patcon.classify import (
    TailReport,
    critical_value,
    generalized_index,
    multiindex,
    ordering_check,
    tail_fit,
)
from patcon.evolve import (
    EnergyTrace,
    EvolutionConfig,
    bound_check,
    energy_pair,
    integrate,
)

__all__ = [
    "Branch",
    "DiffOperator",
    "EnergyTrace",
    "EvolutionConfig",
    "Family",
    "FoldRecord",
    "Grid",
    "MultiIndex",
    "NoConvergence",
    "Problem",
    "Profile",
    "SingularJacobian",
    "StartNotConverged",
    "StepControl",
    "TailReport",
    "TemplateSpec",
    "ZerothSign",
    "bifurcation_points",
    "bound_check",
    "build_operator",
    "continue_branch",
    "critical_value",
    "detect_folds",
    "eigen_smallest",
    "energy_pair",
    "fibering_roots",
    "g_eval",
    "generalized_index",
    "integrate",
    "multiindex",
    "newton_solve",
    "nonlocal_branch",
    "ordering_check",
    "tail_fit",
    "template_profile",
]

__version__ = "0.1.0"
