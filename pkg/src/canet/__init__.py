"""Change adapter network for multi-dataset bitemporal change detection."""
from .tensor import Parameter, Tape, Tensor, backward, checked, precision
from .model import CANetModel, EncoderConfig, ModelConfig, ParamPartition, apply_ablation

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "checked",
    "precision",
    "CANetModel",
    "ModelConfig",
    "EncoderConfig",
    "ParamPartition",
    "apply_ablation",
]
