"""Parameter-efficient tuning architecture search by first-order pruning."""

from .config import RunConfig, load_config
from .errors import (
    AttachmentError,
    ConfigError,
    DimensionError,
    DivergenceError,
    InputError,
    ParseError,
    PetNasError,
    UsageError,
)
from .model import Model, TransformerConfig
from .pipeline import ArchitectureSpec, architecture_map, retrain_from_spec, run_baseline, run_nas

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "AttachmentError",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "InputError",
    "Model",
    "ParseError",
    "PetNasError",
    "RunConfig",
    "TransformerConfig",
    "UsageError",
    "architecture_map",
    "load_config",
    "retrain_from_spec",
    "run_baseline",
    "run_nas",
]
