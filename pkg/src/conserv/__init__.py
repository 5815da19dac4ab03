"""Conservation-constrained probabilistic field estimation.

Estimate a space-time field from scattered observations (step one), then
condition the estimate on the integral form of a conservation law expressed
as a linear constraint with tunable noise (step two). Ships with closed-form
benchmark problems, quadrature constraint builders, evaluation metrics, a
convergence verification suite, an experiment harness, and a FastAPI service
fronted by the ``conserv`` CLI.
"""

__version__ = "0.1.0"

from .errors import (
    ConditioningError,
    ConservError,
    ConvergenceError,
    DomainError,
    FitError,
    InsufficientDataError,
    MonotonicityError,
    NonUniformGridError,
    ShapeError,
    SolverError,
)
from .fields import ContextSet, GaussianField
from .grids import (
    Grid,
    LinearConstraint,
    build_left_riemann,
    build_right_riemann,
    build_second_difference,
    build_smoothing_penalty,
    build_trapezoid,
    penalty_row_variance,
)
from .pdes import (
    PdeFamily,
    PdeInstance,
    StefanConstants,
    conserved_mass,
    eval_exact,
    eval_on_grid,
    shock_position_exact,
    solve_stefan_constants,
)

__all__ = [
    "__version__",
    "ConservError",
    "DomainError",
    "ShapeError",
    "NonUniformGridError",
    "ConvergenceError",
    "ConditioningError",
    "SolverError",
    "InsufficientDataError",
    "FitError",
    "MonotonicityError",
    "Grid",
    "LinearConstraint",
    "build_trapezoid",
    "build_left_riemann",
    "build_right_riemann",
    "build_second_difference",
    "build_smoothing_penalty",
    "penalty_row_variance",
    "GaussianField",
    "ContextSet",
    "PdeFamily",
    "PdeInstance",
    "StefanConstants",
    "solve_stefan_constants",
    "eval_exact",
    "eval_on_grid",
    "conserved_mass",
    "shock_position_exact",
]
