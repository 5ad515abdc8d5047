"""Inland-waterbody detection from GNSS-R delay-Doppler maps.

Two classifiers share a transformer encoder: ``IwdQueenModel`` refines its
token with simulated 4-qubit circuits, ``IwdTransformerModel`` with a small
depthwise convolution.  Everything runs on numpy with a built-in
reverse-mode autodiff engine.
"""

from .ddm_core import DdmRecord, FilterPolicy, WaterMask, normalize, passes_filter, snr_db
from .errors import ConfigError, DataError, DomainError, IwdError, NumericalError, ShapeError
from .evaluation import ConfusionCounts, GridSpec, Metrics, grid_aggregate, metrics
from .models import (IwdQueenModel, IwdTransformerModel, build_model, classify, load_checkpoint,
                     predict, save_checkpoint)
from .training import TrainConfig, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "DdmRecord", "FilterPolicy", "WaterMask", "normalize", "passes_filter", "snr_db",
    "ConfigError", "DataError", "DomainError", "IwdError", "NumericalError", "ShapeError",
    "ConfusionCounts", "GridSpec", "Metrics", "grid_aggregate", "metrics",
    "IwdQueenModel", "IwdTransformerModel", "build_model", "classify", "load_checkpoint",
    "predict", "save_checkpoint", "TrainConfig", "total_loss", "train",
]
