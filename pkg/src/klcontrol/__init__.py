"""KL optimal control for discrete-time systems.

Path-integral estimation of the desirability ``Z = exp(-V)``, the closed-form
linear-Gaussian case, finite-input and finite-state solvers, and a cart-pole
benchmark.
"""

from .core import (
    CostSchedule,
    DegenerateStateError,
    DomainError,
    DynamicsModel,
    EstimationFailedError,
    KLControlError,
    NoiseModel,
    RolloutDivergedError,
    SolverError,
    Trajectory,
    path_cost,
    rollout_noise_driven,
)
from .discrete import DiscreteInputSet, discretized_gaussian_pmf, optimal_action_probs, run_closed_loop
from .finite_mdp import FiniteMdp, optimal_policy, optimal_transition, solve_desirability
from .lqg import (
    LqgProblem,
    log_desirability_backward,
    log_desirability_forward,
    lqr_value,
    noncausal_policy_stage,
    policy_stage,
    solve_riccati,
)
from .path_integral import estimate_log_desirability, sample_optimal_control_snis
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "CostSchedule", "DegenerateStateError", "DiscreteInputSet", "DomainError", "DynamicsModel",
    "EstimationFailedError", "FiniteMdp", "KLControlError", "LqgProblem", "NoiseModel", "RngStream",
    "RolloutDivergedError", "SolverError", "Trajectory", "discretized_gaussian_pmf",
    "estimate_log_desirability", "log_desirability_backward", "log_desirability_forward", "lqr_value",
    "noncausal_policy_stage", "optimal_action_probs", "optimal_policy", "optimal_transition", "path_cost",
    "policy_stage", "rollout_noise_driven", "run_closed_loop", "sample_optimal_control_snis",
    "solve_desirability", "solve_riccati",
]
