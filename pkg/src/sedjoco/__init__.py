"""Extended joint congruence (SeDJoCo) solvers and multi-set separation tools."""

from .core import (
    AugmentedTargetSet,
    ExistenceReport,
    ProblemDims,
    ProblemInstance,
    ResidualReport,
    SolutionSet,
    build_augmented_targets,
    check_existence,
    log_likelihood_core,
    permute_problem,
    permute_solution,
    random_pd_problem,
    residual,
)
from .solvers import (
    ConvergenceTrace,
    NonConvergenceError,
    SolverOptions,
    gradient,
    hessian,
    ir_solve,
    make_initial,
    newton_solve,
    standard_sedjoco_solve,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentedTargetSet",
    "ExistenceReport",
    "ProblemDims",
    "ProblemInstance",
    "ResidualReport",
    "SolutionSet",
    "build_augmented_targets",
    "check_existence",
    "log_likelihood_core",
    "permute_problem",
    "permute_solution",
    "random_pd_problem",
    "residual",
    "ConvergenceTrace",
    "NonConvergenceError",
    "SolverOptions",
    "gradient",
    "hessian",
    "ir_solve",
    "make_initial",
    "newton_solve",
    "standard_sedjoco_solve",
]
