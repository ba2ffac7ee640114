"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, preset, or precondition on the caller's inputs."""


class StructuralError(ValueError):
    """Tensor or architecture shapes that do not fit together."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ValidationError(ValueError):
    """Input data outside its allowed value set (e.g. a non-binary mask)."""


class DataIOError(OSError):
    """A dataset file could not be read or decoded."""
