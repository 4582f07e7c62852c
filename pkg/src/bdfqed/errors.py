"""Exception types shared across modules."""


class NumericalError(RuntimeError):
    """Base class for numerical failures; the CLI maps these to exit code 2."""


class CutoffError(ValueError):
    """A momentum lies outside the cutoff ball."""


class GradingError(ValueError):
    """An operation needs pure-graded input."""


class ResolutionError(ValueError):
    """The discretisation is too coarse for the requested operation."""


class DivergenceError(NumericalError):
    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = list(residual_history)


class QuadratureError(NumericalError):
    def __init__(self, message, error_estimate):
        super().__init__(message)
        self.error_estimate = error_estimate


class UnsupportedOrderError(ValueError):
    pass


class CompressionError(NumericalError):
    def __init__(self, message, discarded_weight):
        super().__init__(message)
        self.discarded_weight = discarded_weight


class NonContractionError(NumericalError):
    def __init__(self, message, ratios):
        super().__init__(message)
        self.ratios = list(ratios)


class BasisError(NumericalError):
    pass


class ScfError(NumericalError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)
