from .kernels import (
    BUY,
    SELL,
    EventHistory,
    ExponentialKernel,
    GridKernel,
    HawkesModel,
    Kernel,
    NonIntegrableKernelError,
    PowerLawKernel,
    SumExponentialKernel,
    branching_matrix,
    compensator,
    intensity,
    kernel_eval,
    kernel_from_dict,
    kernel_l1,
    log_grid_edges,
    poisson_model,
    spectral_radius,
    zero_kernel,
)

__all__ = [
    "BUY",
    "SELL",
    "EventHistory",
    "ExponentialKernel",
    "GridKernel",
    "HawkesModel",
    "Kernel",
    "NonIntegrableKernelError",
    "PowerLawKernel",
    "SumExponentialKernel",
    "branching_matrix",
    "compensator",
    "intensity",
    "kernel_eval",
    "kernel_from_dict",
    "kernel_l1",
    "log_grid_edges",
    "poisson_model",
    "spectral_radius",
    "zero_kernel",
]
