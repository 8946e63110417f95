"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input or configuration violates a documented invariant."""


class ParseError(ValueError):
    """A file could not be parsed."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite intermediate."""


class UnsupportedError(ValueError):
    """The requested operation is not defined for this configuration."""
