"""Dynamic label injection: batch balancing via cut-paste and Poisson cloning."""

from .inject import (
    DEFAULT_DEFECT_TRANSFORMS,
    InjectionConfig,
    InjectionRecord,
    InjectionResult,
    count_batch_classes,
    cut_paste,
    defect_free_indices,
    dilate_mask,
    harvest_defect_free,
    inject_batch,
    jitter_defect,
    poisson_clone,
    resize_sample,
    select_minority_class,
    write_injection_report,
)
from .poisson import (
    PoissonConvergenceError,
    PoissonResult,
    PoissonSystem,
    divergence,
    forward_gradient,
    laplacian,
    solve_poisson,
)

__all__ = [
    "DEFAULT_DEFECT_TRANSFORMS",
    "InjectionConfig",
    "InjectionRecord",
    "InjectionResult",
    "PoissonConvergenceError",
    "PoissonResult",
    "PoissonSystem",
    "count_batch_classes",
    "cut_paste",
    "defect_free_indices",
    "dilate_mask",
    "divergence",
    "forward_gradient",
    "harvest_defect_free",
    "inject_batch",
    "jitter_defect",
    "laplacian",
    "poisson_clone",
    "resize_sample",
    "select_minority_class",
    "solve_poisson",
    "write_injection_report",
]
