"""Exception types shared across the package."""


class SeqvcError(Exception):
    """Base class for all package errors."""


class DimensionError(SeqvcError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class InvalidMaskError(SeqvcError, ValueError):
    """A mask leaves no valid entries where at least one is required."""


class EmptyInputError(SeqvcError, ValueError):
    """A sequence or dataset that must be non-empty is empty."""


class StaleGraphError(SeqvcError, RuntimeError):
    """backward() was called twice on the same recorded graph."""


class NumericalError(SeqvcError, RuntimeError):
    """A non-finite value appeared where finiteness is required."""


class ConfigError(SeqvcError, ValueError):
    """A configuration value violates its invariant."""


class FormatError(SeqvcError, ValueError):
    """A binary or text file does not match its declared format."""


class UnsupportedVersionError(FormatError):
    """File carries a version byte this code does not understand."""
