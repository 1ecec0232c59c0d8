"""Relative pose from bearing correspondences with feature uncertainty."""
from .energy import BearingPair, CorrespondenceSet, nec_energy, pnec_energy
from .optimizer import (EstimateReport, RelativePose, SolverConfig, joint_refinement,
                        nec_estimate, pnec_estimate)

__version__ = "0.1.0"

__all__ = [
    "BearingPair", "CorrespondenceSet", "EstimateReport", "RelativePose", "SolverConfig",
    "joint_refinement", "nec_energy", "nec_estimate", "pnec_energy", "pnec_estimate",
]
