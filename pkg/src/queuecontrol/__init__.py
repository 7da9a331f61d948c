"""Drift control of a reflected diffusion and its single-server queue approximation."""

from .costs import (
    CostFunction,
    CostKind,
    DomainError,
    ParameterError,
    conjugate_closed_form,
    grid_sup_conjugate,
    legendre_derivative,
    legendre_eval,
    legendre_extended,
    make_custom_cost,
    make_exponential_cost,
    make_inverse_cost,
    make_reciprocal_cost,
)
from .hjb import (
    Classification,
    DcpParams,
    ShootingConfig,
    SolverError,
    TrajectoryOutcome,
    ValueFunctionSolution,
    classify_sweep,
    evaluate_policy,
    integrate_W,
    shoot_r_star,
    solve_zero_control,
)

__version__ = "0.1.0"

from .diffusion import (  # noqa: E402
    ConstantControl,
    FeedbackFromSolution,
    ZeroControl,
    dominance_report,
    estimate_cost,
    estimate_costs,
    simulate_reflected_path,
    skorokhod_map,
)
from .montecarlo import CostEstimate, SimulationError  # noqa: E402
from .queueing import (  # noqa: E402
    PatienceSpec,
    QueueParams,
    ServiceSpec,
    control_to_intensity,
    estimate_queue_cost,
    simulate_queue_path,
)
