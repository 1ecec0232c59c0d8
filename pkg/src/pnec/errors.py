"""Exception types raised across the package."""


class PnecError(Exception):
    """Base class for all library errors."""


class InvalidCovarianceError(PnecError, ValueError):
    """Covariance is not symmetric positive semidefinite."""


class DegenerateAlignmentError(PnecError, ValueError):
    """Bearing too close to (0, 0, -1) to build the tangent alignment."""


class DegeneratePatchError(PnecError, ValueError):
    """Patch has no usable gradient information."""


class OutOfBoundsError(PnecError, ValueError):
    """A sample location falls outside the image patch."""


class SingularityError(PnecError, ArithmeticError):
    """A residual variance vanished (unregularized energy at t = +-f)."""


class UndefinedLimitError(PnecError, ArithmeticError):
    """Directional limit has a zero denominator."""


class InvalidWeightError(PnecError, ValueError):
    """Non-positive residual weight."""


class DegenerateConfigurationError(PnecError, ValueError):
    """Correspondence set cannot constrain the relative pose."""


class ConfigError(PnecError, ValueError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class FileFormatError(PnecError, ValueError):
    """Malformed correspondence file; ``line`` is 1-based."""

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")
