"""Instruction-conditioned channel-wise gating of visual tokens, desk scale."""

from .adapter import (
    ModaConfig,
    ModaParams,
    ModulationMask,
    compute_mask,
    l1_mask_penalty,
    moda_forward,
    modulate,
    param_count,
)
from .model import Batch, MLLMModel, ModelDims, forward_train, generate
from .rng import Rng
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "MLLMModel",
    "ModaConfig",
    "ModaParams",
    "ModelDims",
    "ModulationMask",
    "Rng",
    "Tensor",
    "compute_mask",
    "forward_train",
    "generate",
    "l1_mask_penalty",
    "moda_forward",
    "modulate",
    "param_count",
]
