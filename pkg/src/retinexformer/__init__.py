"""Retinex-guided transformer for low-light enhancement on a numpy autodiff engine."""

import os

if os.environ.get("RXF_DETERMINISTIC") == "1":
    # one BLAS thread keeps reduction order fixed; must happen before numpy loads
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError
from .network import ModelConfig, init_parameters, load_weights, save_weights
from .orf import DegradationConfig, orf_forward
from .tensor import Tensor, backward, precision
from .train import TrainConfig, enhance, evaluate, train

__all__ = [
    "ConfigError",
    "DegradationConfig",
    "FormatError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "backward",
    "enhance",
    "evaluate",
    "init_parameters",
    "load_weights",
    "orf_forward",
    "precision",
    "save_weights",
    "train",
]
