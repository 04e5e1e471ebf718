"""Simulation and analysis of 1D Euler alignment with topological communication protocols.

The velocity equation in mass coordinates is autonomous, so a run solves it
first (``v_solver``) and then drives a scalar conservation law for the CDF
(``m_solver``).  A particle flow-map integrator (``lagrangian``) provides an
independent pipeline for regular protocols.
"""

__version__ = "0.1.0"

from .exceptions import (AdmissibilityError, ArtifactIOError, ConfigurationError, KernelDomainError,
                         SolverGuardError, TopoflockError, UnsupportedKernelError)
from .kernels import Kernel, eval_Phi, eval_phi, make_kernel, poincare_constant, sup_norm
from .lagrangian import LagrangianFlow, LagrangianState
from .m_solver import SpatialGrid, couple_and_run
from .mass_coords import MassProfile, cdf_eval, quantile, topo_distance
from .v_solver import BoundedAlignmentSolver, RegionalFractionalLaplacian, VelocityGrid

__all__ = [
    "AdmissibilityError", "ArtifactIOError", "BoundedAlignmentSolver", "ConfigurationError", "Kernel",
    "KernelDomainError", "LagrangianFlow", "LagrangianState", "MassProfile", "RegionalFractionalLaplacian",
    "SolverGuardError", "SpatialGrid", "TopoflockError", "UnsupportedKernelError", "VelocityGrid",
    "cdf_eval", "couple_and_run", "eval_Phi", "eval_phi", "make_kernel", "poincare_constant", "quantile",
    "sup_norm", "topo_distance",
]
