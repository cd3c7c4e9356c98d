"""3D CNN-LSTM video sign recognition, implemented on numpy."""

from .errors import (ConfigError, DataError, FormatError, NumericError, ShapeError,
                     SignNetError, StreamError, UsageError)
from .model import ModelConfig, SignNet, build, forward, backward, infer_shapes, param_count
from .tensor import Rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "FormatError", "NumericError", "ShapeError", "SignNetError",
    "StreamError", "UsageError", "ModelConfig", "SignNet", "build", "forward", "backward",
    "infer_shapes", "param_count", "Rng",
]
