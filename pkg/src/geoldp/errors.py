"""Exception hierarchy shared by every geoldp module."""


class GeoLDPError(Exception):
    """Base class for all library errors."""


class ContractViolation(GeoLDPError, ValueError):
    """Arguments violate a documented precondition (e.g. base-point mismatch)."""


class CutLocus(GeoLDPError, ValueError):
    """Two points are too far apart for a unique minimal geodesic."""


class ChartDomain(GeoLDPError, ValueError):
    """A point lies outside the domain of the requested chart."""


class InvalidGenerator(GeoLDPError, ValueError):
    """A rate matrix is not conservative or has negative off-diagonal rates."""


class NoUniqueInvariant(GeoLDPError, ValueError):
    """A rate matrix is reducible, so its invariant measure is not unique."""


class InsufficientData(GeoLDPError, ValueError):
    """Too few usable estimates to fit a decay rate."""


class NumericalFailure(GeoLDPError, RuntimeError):
    """An iterative solver did not converge.

    ``stage`` names the failing computation and ``diagnostics`` carries
    whatever the solver knew when it gave up.
    """

    def __init__(self, message, stage="numerics", **diagnostics):
        super().__init__(message)
        self.stage = stage
        self.diagnostics = diagnostics


class ConfigError(GeoLDPError, ValueError):
    """Configuration could not be parsed or validated."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}, column {column})"
        super().__init__(message + loc)
        self.line = line
        self.column = column
