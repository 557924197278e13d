"""Feedback-alignment training of MLPs with soft initial alignment, plus
Hessian spectral analysis and robustness evaluation."""

from .config import ExperimentConfig, load_config
from .dataio import Dataset, NormalizationStats
from .errors import (ConfigError, DataIOError, FormatError, InvalidArgumentError, ShapeError,
                     SoftAlignError)
from .initialization import InitConfig, initialize
from .network import BackwardRule, FeedbackParams, NetworkParams

__version__ = "0.1.0"

__all__ = [
    "BackwardRule", "ConfigError", "DataIOError", "Dataset", "ExperimentConfig", "FeedbackParams",
    "FormatError", "InitConfig", "InvalidArgumentError", "NetworkParams", "NormalizationStats",
    "ShapeError", "SoftAlignError", "initialize", "load_config",
]
