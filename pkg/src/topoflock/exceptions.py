"""Exception hierarchy. The CLI maps each family to an exit code."""


class TopoflockError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TopoflockError, ValueError):
    """Invalid run configuration or incompatible options (exit code 2)."""


class SolverGuardError(TopoflockError, RuntimeError):
    """A runtime stability guard (CFL, RK4 step bound, maximum principle) failed (exit code 3)."""


class KernelDomainError(TopoflockError, ValueError):
    """A kernel was evaluated outside its domain, e.g. a power law at d = 0."""


class UnsupportedKernelError(TopoflockError, TypeError):
    """The requested operation is not defined for this kernel family."""


class AdmissibilityError(TopoflockError, ValueError):
    """A mass profile with atoms was passed where an absolutely continuous one is required."""


class ArtifactIOError(TopoflockError, OSError):
    """Reading a config/input file or writing an artifact failed (exit code 4)."""
