"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .gradcheck import check_parameter_gradients, finite_difference_check, numeric_gradient, relative_error
from .ops import (
    MASK_FILL,
    absolute,
    add,
    concat,
    expand,
    index,
    l1_mean,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softplus,
    sub,
    swapaxes,
    transpose,
)
from .ops import sum as reduce_sum
from .svd import svd3
from .tensor import ComputationRecord, Tensor, as_tensor, is_grad_enabled, no_grad, record_op

__all__ = [
    "MASK_FILL", "ComputationRecord", "Tensor", "absolute", "add", "as_tensor", "check_parameter_gradients",
    "concat",
    "expand", "finite_difference_check", "index", "is_grad_enabled", "l1_mean", "layer_norm",
    "linear", "masked_softmax", "matmul", "mean", "mul", "no_grad", "numeric_gradient",
    "record_op", "reduce_sum", "relative_error", "relu", "reshape", "softmax", "softplus",
    "sub", "svd3", "swapaxes", "transpose",
]
