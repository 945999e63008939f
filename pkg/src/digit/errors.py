"""Exception types shared across the platform."""


class DigitError(Exception):
    """Base class for every library error."""


class ParseError(DigitError):
    """Input file is malformed (bad JSON, missing or ill-typed keys)."""


class ValidationError(DigitError):
    """A domain invariant is violated; the message names the first offender."""


class NoRoute(DigitError):
    """Destination unreachable from origin."""


class UnknownSegment(DigitError):
    pass


class UnknownIntersection(DigitError):
    pass


class InvalidRoute(DigitError):
    pass


class ConstraintViolation(DigitError):
    """Signal-timing (or other operational) constraint check failed."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "constraint violation")


class EmptyWindow(DigitError):
    """Requested metrics window contains no data at all."""


class WindowMismatch(DigitError):
    """A sensor record falls outside the aggregation window."""


class InsufficientData(DigitError):
    pass


class UnknownKey(DigitError):
    pass


class ShapeMismatch(DigitError):
    pass


class EmptySplit(DigitError):
    pass


class Diverged(DigitError):
    """Training produced a non-finite loss."""


class StorageError(DigitError):
    pass


class UnknownVersion(DigitError):
    pass


class NotCandidate(DigitError):
    pass


class NoActiveModel(DigitError):
    pass


class StaleInput(DigitError):
    """Sync input is older than the twin's last synchronized window."""


class ReconstructionUnavailable(DigitError):
    """Twin state too stale to rebuild a simulation snapshot from."""


class DeliveryFailure(DigitError):
    """Actuation command could not be delivered to the physical system."""
