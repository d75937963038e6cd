"""Quantization-aware training with learned step sizes.

Training-path quantizers with transition-sensitive step-size gradients,
a minimal autodiff tensor core, momentum-SGD fine-tuning, an integer
inference path, and the diagnostics to check that it all balances.
"""

from .tensor import Tensor, conv2d, softmax_cross_entropy
from .quantizer import (QuantSpec, StepSizeParam, IntTensor, quant_levels,
                        quantize_forward, quantize, step_size_grad,
                        data_grad_mask, grad_scale_factor, init_step_size,
                        gradscale, roundpass)
from .layers import (ModelConfig, QuantizedModel, QuantizedLayer, build_model,
                     save_checkpoint, load_checkpoint, load_full_precision)
from .trainer import (RunConfig, SGD, Metrics, cosine_lr, step_lr, kd_loss,
                      train, evaluate, TrainingDiverged)
from .inference import (IntModel, export_int, int_forward, check_equivalence,
                        save_int_model, load_int_model)
from .analysis import measure_R, quant_error_sweep, model_size, emit_report
from .estimator import LsqClassifier

__version__ = "0.1.0"

__all__ = [
    "Tensor", "conv2d", "softmax_cross_entropy",
    "QuantSpec", "StepSizeParam", "IntTensor", "quant_levels",
    "quantize_forward", "quantize", "step_size_grad", "data_grad_mask",
    "grad_scale_factor", "init_step_size", "gradscale", "roundpass",
    "ModelConfig", "QuantizedModel", "QuantizedLayer", "build_model",
    "save_checkpoint", "load_checkpoint", "load_full_precision",
    "RunConfig", "SGD", "Metrics", "cosine_lr", "step_lr", "kd_loss",
    "train", "evaluate", "TrainingDiverged",
    "IntModel", "export_int", "int_forward", "check_equivalence",
    "save_int_model", "load_int_model",
    "measure_R", "quant_error_sweep", "model_size", "emit_report",
    "LsqClassifier",
]
