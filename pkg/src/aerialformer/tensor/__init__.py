"""Float64 tensor substrate: tape autodiff, NN operators, layers, checkpoints."""
from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import BACKEND as KERNEL_BACKEND
from .module import (BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module,
                     Parameter, trunc_normal)
from .tensor import (GradTape, Tensor, add, as_tensor, backward, concat, count_flops,
                     current_tape, div, exp, getitem, is_grad_enabled, linear, log, matmul,
                     mean, mul, neg, no_grad, power, reshape, roll, split, sub, sum_, take,
                     transpose, use_tape)

__all__ = [
    "BatchNorm2d", "Conv2d", "ConvTranspose2d", "GradTape", "KERNEL_BACKEND", "LayerNorm",
    "Linear", "Module", "Parameter", "Tensor", "add", "as_tensor", "backward", "concat",
    "count_flops", "current_tape", "div", "exp", "functional", "getitem", "is_grad_enabled",
    "linear", "load_checkpoint", "log", "matmul", "mean", "mul", "neg", "no_grad", "power",
    "reshape", "roll", "save_checkpoint", "split", "sub", "sum_", "take", "transpose",
    "trunc_normal", "use_tape",
]
