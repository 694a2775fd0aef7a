"""Exception types shared across the package."""


class InvalidDistributionError(ValueError):
    """A phase-type representation violates its structural constraints."""


class InfeasibleFitError(ValueError):
    """No MErlang distribution matches the requested (mean, SCV, f) triple."""


class VanishingSurvivalError(ArithmeticError):
    """Conditioning on an event whose probability underflowed to zero."""


class SizeLimitError(ValueError):
    """An explicit representation would exceed the configured size cap."""


class NotSubgeneratorError(ValueError):
    """Matrix is not a (sub)generator: negative off-diagonal or positive row sum."""


class ArityError(ValueError):
    """Aversion scores of different length were compared."""


class ConvergenceError(RuntimeError):
    """An iterative procedure hit its iteration cap.

    Attributes
    ----------
    residual : float
        Last residual reached.
    history : list of float
        Residual per iteration, oldest first.
    """

    def __init__(self, message, residual=float("nan"), history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else []
