"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent setup."""


class ShapeError(ValueError):
    """Tensor shapes do not compose for the requested operation."""


class ProtocolError(RuntimeError):
    """A caller violated an operation contract (e.g. wrong contribution count)."""


class AccountingError(ArithmeticError):
    """Privacy accounting could not produce a finite, trustworthy value."""


class PrivacyViolationError(ValueError):
    """A model definition would leak information across examples."""


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN or infinity; training must not continue."""


class DataFormatError(ValueError):
    """An input file does not match its declared binary or text format."""
