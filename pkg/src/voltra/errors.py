"""Exception hierarchy shared by all voltra modules."""


class VoltraError(Exception):
    """Base class for every error raised by voltra."""


class DomainError(VoltraError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class SingularityError(DomainError):
    """A singular kernel was evaluated at its singular point."""


class PreconditionError(DomainError):
    """A structural hypothesis of an operation is not satisfied."""


class AccuracyError(VoltraError, ArithmeticError):
    """A numerical expansion failed to reach the requested accuracy.

    The attained error estimate is stored in ``estimate``.
    """

    def __init__(self, message, estimate=float("nan")):
        super().__init__(message)
        self.estimate = estimate


class NumericalFailure(VoltraError, ArithmeticError):
    """A discretized computation produced values violating a known invariant."""


class StepSizeError(NumericalFailure):
    """The per-step scalar solve did not converge; a smaller step is needed."""


class BoundViolation(NumericalFailure):
    """A solution left the interval guaranteed by the comparison theorem."""


class StructureError(VoltraError, ValueError):
    """A nonlinearity does not have the convex single-root structure required."""


class InstabilityError(VoltraError, RuntimeError):
    """A self-exciting simulation exceeded its event budget."""
