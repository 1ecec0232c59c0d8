from .eigen import nec_translation, smallest_eigenpair
from .lattice import fibonacci_lattice
from .refinement import joint_jacobian, joint_residuals
from .rotation import LMSchedule, rotation_objective, rotation_objective_gradient, rotation_step
from .scf import scf_e_matrix, scf_optimize
from .solver import (EstimateReport, RelativePose, SolverConfig, joint_refinement,
                     nec_estimate, pnec_estimate, resolve_translation_sign)

__all__ = [
    "EstimateReport", "LMSchedule", "RelativePose", "SolverConfig", "fibonacci_lattice",
    "joint_jacobian", "joint_refinement", "joint_residuals", "nec_estimate", "nec_translation",
    "pnec_estimate", "resolve_translation_sign", "rotation_objective",
    "rotation_objective_gradient", "rotation_step", "scf_e_matrix", "scf_optimize",
    "smallest_eigenpair",
]
