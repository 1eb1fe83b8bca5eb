"""Exception hierarchy for the solver pipeline."""


class MixedVemError(Exception):
    """Base class for all package errors."""


class DegenerateGeometryError(MixedVemError):
    """A polytope has (numerically) zero measure or a non-planar face."""


class ConditioningError(MixedVemError):
    """A local factorization lost too many digits to be trusted."""


class ConformityError(MixedVemError):
    """Mesh entities fail to tile an interface or a domain."""


class TopologyError(MixedVemError):
    """Inconsistent incidence data (dangling interface, bad closure)."""


class SingularSystemError(MixedVemError):
    """The global system is singular; carries a null-space estimate."""

    def __init__(self, message, null_dim=None):
        super().__init__(message)
        self.null_dim = null_dim


class ConfigError(MixedVemError):
    """Invalid problem configuration or input file."""
