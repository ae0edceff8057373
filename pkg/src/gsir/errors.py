"""Exception types shared across the pipeline."""


class GsirError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(GsirError, ValueError):
    """An argument violates a documented precondition."""


class SchemaError(GsirError, ValueError):
    """A file payload does not match its documented layout."""


class PreconditionError(GsirError, RuntimeError):
    """A pipeline stage was invoked before its required inputs exist."""
