"""Shared exception types.

Exit-code mapping used by the CLI: input/contract problems map to code 2,
numerical failures and infeasible instances to code 1.
"""


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class DomainError(ValueError):
    """An input is outside the mathematical domain of an operation."""


class InfeasibleError(RuntimeError):
    """No solution exists for the given instance.

    Carries the limiting value (e.g. an asymptote) when one is known.
    """

    def __init__(self, message, limit=None):
        super().__init__(message)
        self.limit = limit


class NumericalError(RuntimeError):
    """An iterative method failed to converge or produced non-finite values."""


class TrainingError(RuntimeError):
    """Training diverged or hit a non-finite gradient."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DependencyError(RuntimeError):
    """A pipeline stage was invoked before its prerequisite artifacts exist."""
