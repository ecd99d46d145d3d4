"""Minimal reverse-mode autodiff over float64 arrays, with double backward."""

from .engine import GradientMap, backward, grad
from .gradcheck import finite_difference_check, numeric_gradient, relative_error
from .tensor import (
    DivisionError,
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    broadcast_to,
    concat,
    conv1d,
    div,
    enable_grad,
    exp,
    expand_dims,
    fold,
    getitem,
    is_grad_enabled,
    log,
    log_softmax,
    mask_mul,
    matmul,
    max_,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    scatter_add,
    softmax,
    square,
    sub,
    sum_,
    sum_to,
    swapaxes,
    tanh,
    transpose,
    unfold,
)

__all__ = [
    "DivisionError", "GradientMap", "ShapeError", "Tensor", "abs_", "add", "as_tensor",
    "backward", "broadcast_to", "concat", "conv1d", "div", "enable_grad", "exp", "expand_dims",
    "finite_difference_check", "fold", "getitem", "grad", "is_grad_enabled", "log",
    "log_softmax", "mask_mul", "matmul", "max_", "maximum", "mean", "minimum", "mul", "neg",
    "no_grad", "numeric_gradient", "power", "relative_error", "reshape", "scatter_add",
    "softmax", "square", "sub", "sum_", "sum_to", "swapaxes", "tanh", "transpose", "unfold",
]
