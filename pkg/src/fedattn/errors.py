"""Exception types raised across the package."""


class FedAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(FedAttnError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(FedAttnError, FloatingPointError):
    """A softmax row has every entry masked."""


class ScheduleError(FedAttnError, ValueError):
    """A synchronization schedule is invalid or infeasible."""


class PartitionError(FedAttnError, ValueError):
    """A partition request cannot be satisfied."""


class ConfigError(FedAttnError, ValueError):
    """An experiment description is invalid.

    ``path`` names the offending field, e.g. ``"sweep.H[2]"``.
    """

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
