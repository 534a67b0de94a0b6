"""Output-preserving orthogonal transforms for low-bit uniform quantization."""

from .errors import InputError, LoadError, NumericError, RUQuantError
from .learnable import BlockObjective, FinetuneConfig, ToyBlock, finetune, finite_diff_check, init_theta
from .lloyd import LloydMaxQuantizer, lloyd_max_fit
from .orthogonal import CompositeRotation, compose_rotation, materialize
from .pipeline import Step1Config, Step1Transform, blockwise_rotate, equivalence_residual, ruquant_step1
from .quantizer import (QuantConfig, QuantizedTensor, activation_config, dequantize, fake_quantize,
                        uniform_quantize, weight_config)
from .tensor import Seed

__all__ = [
    "activation_config", "weight_config",
    "BlockObjective", "CompositeRotation", "FinetuneConfig", "InputError", "LoadError",
    "LloydMaxQuantizer", "NumericError", "QuantConfig", "QuantizedTensor", "RUQuantError", "Seed",
    "Step1Config", "Step1Transform", "ToyBlock", "blockwise_rotate", "compose_rotation", "dequantize",
    "equivalence_residual", "fake_quantize", "finetune", "finite_diff_check", "init_theta",
    "lloyd_max_fit", "materialize", "ruquant_step1", "uniform_quantize",
]
