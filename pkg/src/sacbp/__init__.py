"""Receding-horizon belief-space control via optimised control perturbations."""

from .adjoint import (
    AdjointTrajectory,
    VariationTrajectory,
    adjoint_backward,
    adjoint_backward_general,
    adjoint_backward_mixed,
    cost_variation_adjoint,
    cost_variation_forward,
    jacobian,
    variational_forward,
)
from .hybrid import (
    ControlSchedule,
    HybridTrajectory,
    MixedModel,
    PerturbedPolicy,
    RolloutDiverged,
    ScenarioModel,
    StatePolicy,
    euler_flow,
    perturb_control,
    simulate_nominal,
    total_cost,
)
from .planner import (
    MetricsLog,
    PerturbationResult,
    PlannerParams,
    SACBPController,
    expected_cost_variation,
    mode_insertion_gradient_fd,
    optimize_perturbation,
    receding_horizon_run,
    sacbp_control_update,
    solve_box_qp,
)

__version__ = "0.1.0"
