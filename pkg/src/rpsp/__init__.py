"""Recurrent predictive state policy networks: a PSR filter initialized by
two-stage regression, refined by BPTT, driving a Gaussian reactive policy."""

from .config import ExperimentConfig, load_config
from .envs import make_env
from .errors import (DimensionError, FilterDegeneracyError, GradientOverflowError, InitializationDataError,
                     InvalidConfigurationError, RPSPError, SingularityError)
from .init2sr import PSRConfig, initialize_psr, random_psr
from .policy import init_policy, policy_forward
from .psr import PSRParams, filter_trajectory, predict_observation
from .training import rpspo_train
from .trajectory import Trajectory

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "load_config", "make_env", "DimensionError", "FilterDegeneracyError",
    "GradientOverflowError", "InitializationDataError", "InvalidConfigurationError", "RPSPError",
    "SingularityError", "PSRConfig", "initialize_psr", "random_psr", "init_policy", "policy_forward",
    "PSRParams", "filter_trajectory", "predict_observation", "rpspo_train", "Trajectory",
]
