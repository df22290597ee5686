"""Exception types shared across the toolkit."""


class PoakitError(Exception):
    """Base class for all toolkit errors."""


class InvalidCoordinateError(PoakitError):
    """Latitude/longitude out of range or non-finite."""


class OutOfChartError(PoakitError):
    """Point too far from the local projection origin to be projected."""


class DegenerateTripError(PoakitError):
    """A path is too short (or has zero length) for the requested geometry."""


class InvalidParameterError(PoakitError):
    """A numeric parameter is outside its documented domain."""


class MalformedTrackError(PoakitError):
    """Track timestamps are not strictly increasing."""


class UnresolvableProfileError(PoakitError):
    """Home/school inference lacks evidence or no school is close enough."""


class NoVehicleModeError(PoakitError):
    """A trip has no metro/bus/car segment to derive a principal mode from."""


class CapacityError(PoakitError):
    """Input exceeds a configured size guard."""


class InfeasibleInstanceError(PoakitError):
    """A commodity's destination is unreachable from its origin."""


class MissingDecompositionError(PoakitError):
    """A flow assignment lacks the path decomposition needed by the caller."""


class CalibrationFailureError(PoakitError):
    """No candidate band width rejects every negative example."""


class PrerequisiteError(PoakitError):
    """A pipeline stage is missing an input artifact; names the stage to run."""


class ConfigurationError(PoakitError):
    """Pipeline configuration is incomplete or inconsistent."""


class ProviderError(PoakitError):
    """Optimal-duration provider failed after retries."""
