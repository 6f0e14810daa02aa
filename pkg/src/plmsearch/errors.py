"""Exception types shared across the package."""


class PlmSearchError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PlmSearchError, ValueError):
    pass


class NumericError(PlmSearchError, ArithmeticError):
    pass


class ContractError(PlmSearchError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ValidationError(PlmSearchError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class BoundsError(PlmSearchError, IndexError):
    pass


class OracleError(PlmSearchError, RuntimeError):
    pass


class MeasurementError(PlmSearchError, RuntimeError):
    pass


class InfeasibleError(PlmSearchError, RuntimeError):
    """No architecture satisfies the latency budget.

    ``tightest`` holds the smallest predicted latency seen, i.e. the
    tightest budget that would have been satisfiable.
    """

    def __init__(self, message, tightest=None):
        super().__init__(message)
        self.tightest = tightest


class CheckpointError(PlmSearchError, IOError):
    pass
