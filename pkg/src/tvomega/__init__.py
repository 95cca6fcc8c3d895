"""Time-varying importance weights for gradually drifting data.

``omega(x, T, t) = exp(g(x, T) - g(x, t))`` says how much a sample seen at
time ``t`` should count when fitting a model for time ``T``.
"""

from .drift import DriftSchedule, Stream, generate_stream
from .omega import OmegaEstimator, TimeEncoding, generate_data, train
from .trainers import ModelConfig, OmegaConfig, run_benchmark

__all__ = [
    "DriftSchedule", "Stream", "generate_stream", "OmegaEstimator", "TimeEncoding", "generate_data", "train",
    "ModelConfig", "OmegaConfig", "run_benchmark",
]
__version__ = "0.1.0"
