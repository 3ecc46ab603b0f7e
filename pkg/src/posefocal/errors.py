"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input violates a mathematical precondition."""


class DepthError(DomainError):
    """A point has non-positive depth in front of the camera."""


class DegenerateInputError(DomainError):
    """Input is degenerate (zero vector, parallel pair, ...)."""


class DegenerateFitError(DomainError):
    """Not enough data, or data too degenerate, to fit a distribution."""
