"""Sample-path large-deviations toolkit for rapidly switching regime-modulated diffusions.

Simulators for the scaled chain/diffusion pair, numerical rate-function
evaluators, a most-likely-path variational solver, and a Monte Carlo /
importance-sampling harness built on the exact exponential change of
measure.
"""

from .chain import (
    ChainPath,
    Generator,
    KernelPath,
    TiltField,
    as_simplex,
    as_tilt_field,
    invariant_distribution,
    invariant_kernel,
    mollify,
    occupation_distance,
    occupation_of,
    simulate_chain,
    simulate_tilted_chain,
    validate_generator,
)
from .errors import (
    GridMismatchError,
    InfeasibleTargetError,
    MmldpError,
    NoConvergenceError,
    NoDescentError,
    NonpositiveOffDiagonalError,
    NonpositiveTiltError,
    NonSquareError,
    ParseError,
    RowSumNonzeroError,
    SingularDiffusionError,
    SingularSystemError,
    ValidationError,
)
from .montecarlo import (
    DiffusionPath,
    GammaRow,
    LdpCurve,
    LdpRow,
    ProbEstimate,
    StepFunction,
    ball_probability_is,
    ball_probability_naive,
    chain_likelihood_weight,
    exponential_product_check,
    gamma_closeness,
    ldp_curve,
    martingale_check,
    simulate_mmsde,
    uniform_distance,
)
from .pathopt import (
    PathGrid,
    SolverOptions,
    VariationalResult,
    most_likely_path,
    project_simplex,
    zero_cost_path,
)
from .ratefn import (
    RateBreakdown,
    RegimeModel,
    TiltSolution,
    dv_gradient,
    dv_local,
    dv_objective,
    invariant_of_tilt,
    joint_rate,
    mixed_coefficients,
    occupation_rate,
    path_rate,
    tilted_generator,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
