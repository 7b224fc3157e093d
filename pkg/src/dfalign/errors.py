"""Exception hierarchy shared across the package."""


class DFAlignError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DFAlignError):
    """Operands have incompatible or unexpected shapes."""


class NonFiniteError(DFAlignError):
    """A NaN or infinity appeared where only finite values are allowed."""


class ParameterError(DFAlignError):
    """An argument value is outside its valid domain."""


class GenerationError(DFAlignError):
    """Synthetic data generation cannot satisfy the requested layout."""


class FormatError(DFAlignError):
    """A file on disk does not match its declared binary or JSON format."""


class ValidationError(DFAlignError):
    """A loaded record violates a domain invariant."""


class ConfigError(DFAlignError):
    """A run configuration is malformed or contains unknown keys."""


class TransportError(DFAlignError):
    """A remote endpoint could not be reached or returned garbage."""
