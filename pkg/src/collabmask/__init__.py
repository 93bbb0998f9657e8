"""Collaborative masking and targets for masked image modelling, in numpy."""

from .errors import (
    CollabMaskError,
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NonFiniteError,
)
from .masking import aggregate_attention, select_mask, select_mask_topk
from .tensor import Tensor
from .trainer import StepMetrics, TrainConfig, Trainer
from .vit import ViTConfig

__all__ = [
    "CollabMaskError",
    "CompatibilityError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "NonFiniteError",
    "StepMetrics",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "ViTConfig",
    "aggregate_attention",
    "select_mask",
    "select_mask_topk",
]
