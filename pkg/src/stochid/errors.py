"""Exception types shared across the package."""


class StochidError(Exception):
    """Base class for all package errors."""


class DomainError(StochidError, ValueError):
    """An input value violates a mathematical precondition."""


class ConfigError(StochidError, ValueError):
    """A configuration value or file is invalid."""


class SolverError(StochidError, RuntimeError):
    """A numerical solve failed or did not reach the required accuracy."""


class SpdError(SolverError):
    """A matrix that must be symmetric positive-definite is not."""


class DataFormatError(StochidError, ValueError):
    """A database, model or observation file is malformed."""


class KindMismatchError(DataFormatError):
    """A database of the wrong kind (initial vs processed) was supplied."""
