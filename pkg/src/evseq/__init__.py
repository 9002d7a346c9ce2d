"""Desk-scale event-camera pretraining: pseudo-frame accumulation, teacher
alignment losses, multimodal autoregressive sequence modeling, task heads
and evaluation metrics, all on a deterministic float64 substrate."""

from .config import RunConfig, load_config, parse_config
from .errors import (
    ConfigError,
    EvseqError,
    StageOrderError,
    TrainingDiverged,
    ValidationError,
)
from .pipeline import run_pipeline

__all__ = [
    "ConfigError",
    "EvseqError",
    "RunConfig",
    "StageOrderError",
    "TrainingDiverged",
    "ValidationError",
    "load_config",
    "parse_config",
    "run_pipeline",
]

__version__ = "0.1.0"
