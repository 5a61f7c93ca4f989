"""Exception types raised across the package."""


class DistillError(Exception):
    """Base class for all package errors."""


class ShapeError(DistillError, ValueError):
    pass


class DisconnectedGraphError(DistillError):
    """The requested parameters do not feed the loss."""


class GraphConsumedError(DistillError):
    """A graph was reused after ``backward`` consumed it."""


class ArityError(DistillError, ValueError):
    pass


class CongruenceError(DistillError, ValueError):
    """Two parameter / gradient containers have different segment layouts."""


class DomainError(DistillError, ValueError):
    pass


class LabelError(DistillError, ValueError):
    pass


class DistributionError(DistillError, ValueError):
    """Rows that should sum to one do not."""


class DataError(DistillError, ValueError):
    pass


class ParseError(DataError):
    pass


class DegenerateEpsilonError(DistillError, ArithmeticError):
    """The finite-difference perturbation vanished in float64."""


class ConfigError(DistillError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
