"""Exception types shared across the package."""


class LamocoError(Exception):
    """Base class for all package-specific errors."""


class DegenerateGrid(LamocoError):
    """Control grid is rank deficient or numerically unusable."""


class SizeMismatch(LamocoError):
    """Operands disagree on point count, grid or resolution."""


class InsufficientHistory(LamocoError):
    """Trajectory too short for the requested prediction model."""


class NoOverlap(LamocoError):
    """Two fields share no mutually valid pixels."""


class TooSmall(LamocoError):
    """Input below the minimum size an algorithm can operate on."""


class InvalidSpec(LamocoError):
    """Malformed scene description or config file."""


class NonFinite(LamocoError):
    """A computation produced NaN or infinity where a finite value is required."""
