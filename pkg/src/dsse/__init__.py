"""Two-step state estimation for three-phase unbalanced distribution feeders."""

from .estimator import (
    LinearUpdater,
    MixedUpdater,
    SolverConfig,
    StateEstimate,
    UpdateResult,
    linear_update_complex,
    mixed_update_rect,
    stack_measurements,
    subspace_wls_update,
    wls_subspace,
)
from .measurements import (
    MeasurementFrame,
    MeasurementPlan,
    PseudoMeasurements,
    SensorSpec,
    build_plan,
    sample_pseudo,
    simulate_frame,
)
from .network import (
    AdmittanceBlocks,
    LineSpec,
    NetworkModel,
    build_admittance,
    compute_injections,
    load_network,
    make_network,
    no_load_voltage,
    save_network,
)
from .prior import (
    fixed_point_power_flow,
    load_prior,
    rect_fixed_point_power_flow,
    save_prior,
    wls_prior,
)
from .subspace import (
    RectSubspaceBasis,
    SubspaceBasis,
    complex_kernel_basis,
    feasibility_residual,
    lift,
    project,
    rect_kernel_basis,
)

__version__ = "0.1.0"

__all__ = [
    "AdmittanceBlocks",
    "LinearUpdater",
    "LineSpec",
    "MeasurementFrame",
    "MeasurementPlan",
    "MixedUpdater",
    "NetworkModel",
    "PseudoMeasurements",
    "RectSubspaceBasis",
    "SensorSpec",
    "SolverConfig",
    "StateEstimate",
    "SubspaceBasis",
    "UpdateResult",
    "build_admittance",
    "build_plan",
    "complex_kernel_basis",
    "compute_injections",
    "feasibility_residual",
    "fixed_point_power_flow",
    "lift",
    "linear_update_complex",
    "load_network",
    "load_prior",
    "make_network",
    "mixed_update_rect",
    "no_load_voltage",
    "project",
    "rect_fixed_point_power_flow",
    "rect_kernel_basis",
    "sample_pseudo",
    "save_network",
    "save_prior",
    "simulate_frame",
    "stack_measurements",
    "subspace_wls_update",
    "wls_prior",
    "wls_subspace",
]
