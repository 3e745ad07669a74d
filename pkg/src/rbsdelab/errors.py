"""Exception hierarchy shared by every module."""


class RBSDELabError(Exception):
    """Base class for all package errors."""


class ModelError(RBSDELabError, ValueError):
    """A model specification violates one of its invariants."""


class ModelEvaluationError(ModelError):
    """A coefficient returned a non-finite or mis-shaped value."""

    def __init__(self, coefficient, message):
        self.coefficient = coefficient
        super().__init__(f"coefficient '{coefficient}': {message}")


class ConfigurationError(RBSDELabError, ValueError):
    """Inconsistent numerical configuration (mesh, thinning step, missing inputs)."""


class DataError(RBSDELabError, ValueError):
    """Problem data violate the standing assumptions on the chain nodes."""

    def __init__(self, message, witnesses=None):
        self.witnesses = list(witnesses or [])
        super().__init__(message)


class PreconditionError(RBSDELabError, ValueError):
    """An operation was called outside the domain where its guarantee holds."""


class InvariantViolation(RBSDELabError, AssertionError):
    """A post-condition that holds by construction was found broken."""
