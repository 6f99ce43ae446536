"""
Differentiable tensor core for HighFM
"""

from highfm.numerics.gradcheck import GradCheckReport, grad_check
from highfm.numerics.ops import (
    concat,
    conv2d,
    gelu,
    layer_norm,
    log_softmax_lastdim,
    matmul,
    softmax_lastdim,
    transposed_conv2d,
)
from highfm.numerics.tensor import (
    Function,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
    set_debug,
    set_default_dtype,
)

__all__ = [
    "Function",
    "GradCheckReport",
    "Tensor",
    "backward",
    "concat",
    "conv2d",
    "gelu",
    "get_default_dtype",
    "grad_check",
    "layer_norm",
    "log_softmax_lastdim",
    "matmul",
    "no_grad",
    "precision",
    "set_debug",
    "set_default_dtype",
    "softmax_lastdim",
    "transposed_conv2d",
]
