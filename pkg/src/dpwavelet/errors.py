"""Exception hierarchy shared across the package."""


class DPWaveletError(Exception):
    """Base class for all package errors."""


class DimensionError(DPWaveletError, ValueError):
    pass


class ConfigurationError(DPWaveletError, ValueError):
    pass


class CodebookError(DPWaveletError, ValueError):
    pass


class CorruptSequenceError(DPWaveletError, ValueError):
    pass


class SequenceLengthError(DPWaveletError, ValueError):
    pass


class NumericError(DPWaveletError, ArithmeticError):
    pass


class CalibrationError(DPWaveletError):
    """Raised when no noise multiplier reaches the requested budget."""

    def __init__(self, message, epsilon_floor=None):
        super().__init__(message)
        self.epsilon_floor = epsilon_floor


class ResolutionError(DPWaveletError):
    pass


class StatisticsError(DPWaveletError, ValueError):
    pass


class DataError(DPWaveletError):
    pass


class PrivacyBudgetError(DPWaveletError):
    pass


class InvariantError(DPWaveletError):
    pass
