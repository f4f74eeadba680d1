"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    pass


class GridIndexError(IndexError):
    pass


class FactorizationError(RuntimeError):
    """Covariance matrix could not be factorized; carries the failing pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class MemoryBudgetError(MemoryError):
    def __init__(self, message, required_bytes):
        super().__init__(message)
        self.required_bytes = required_bytes


class UnsupportedFieldError(TypeError):
    pass


class UnsupportedDriverError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteStateError(FloatingPointError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class NonContractionError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals
