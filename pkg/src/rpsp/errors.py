"""Exception types shared across the package."""

import numpy as np


class RPSPError(Exception):
    pass


class InvalidConfigurationError(RPSPError, ValueError):
    pass


class DimensionError(RPSPError, ValueError):
    pass


class FilterDegeneracyError(RPSPError, FloatingPointError):
    """Regularized KBR inverse is numerically singular at some time step."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class InitializationDataError(RPSPError, ValueError):
    pass


class SingularityError(RPSPError, np.linalg.LinAlgError):
    pass


class GradientOverflowError(RPSPError, FloatingPointError):
    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t
