"""Exception types shared across the solver modules."""


class SingularGError(Exception):
    """G(sigma) is singular or indefinite where a positive definite solve is required."""


class BoundaryViolation(Exception):
    """A potential function was evaluated outside the interior of its cone."""


class LineSearchFailure(Exception):
    """Backtracking exhausted without an acceptable interior step."""
