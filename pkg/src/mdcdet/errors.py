"""Exception types raised across the package."""


class MDCDetError(Exception):
    """Base class for all package errors."""


class ShapeError(MDCDetError, ValueError):
    pass


class RankError(MDCDetError, ValueError):
    pass


class NonFiniteError(MDCDetError, ValueError):
    """An operation other than softmax received a non-finite value."""


class DegenerateDistributionError(MDCDetError, ValueError):
    """Every logit along a softmax axis is negative infinity."""


class DegenerateVectorError(MDCDetError, ValueError):
    """A vector with zero norm was passed where a direction is required."""


class InvalidBoxError(MDCDetError, ValueError):
    pass


class CapacityError(MDCDetError, ValueError):
    """More ground-truth objects than proposals."""


class NoTargetError(MDCDetError, ValueError):
    pass


class PlacementError(MDCDetError, RuntimeError):
    pass


class StreamFormatError(MDCDetError, ValueError):
    """Malformed or invariant-violating stream file."""


class StartupError(MDCDetError, RuntimeError):
    pass


class CompatibilityError(MDCDetError, ValueError):
    pass


class InvariantViolation(MDCDetError, AssertionError):
    """A continual-training freeze or mask contract was broken."""
