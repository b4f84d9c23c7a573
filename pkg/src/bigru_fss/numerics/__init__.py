from .functional import concat_channels, conv2d, maxpool2d, upsample2d
from .gradcheck import GradCheckReport, NonDeterministicLossError, grad_check, relative_error
from .init import he_init, zeros
from .optim import AdamState, NonFiniteGradientError, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    add_scalar,
    concat,
    div,
    dtype_for,
    elementwise,
    exp,
    getitem,
    log_softmax,
    mean,
    mul,
    no_grad,
    one_minus,
    record_branches,
    relu,
    reshape,
    scale,
    sigmoid,
    stack,
    sub,
    tanh,
    tsum,
)

__all__ = [
    "AdamState", "GradCheckReport", "NonDeterministicLossError", "NonFiniteError",
    "NonFiniteGradientError", "ShapeError", "Tensor", "adam_step", "add", "add_scalar",
    "concat", "concat_channels", "conv2d", "div", "dtype_for", "elementwise", "exp",
    "getitem", "grad_check", "he_init", "log_softmax", "maxpool2d", "mean", "mul",
    "no_grad", "one_minus", "record_branches", "relative_error", "relu", "reshape", "scale", "sigmoid",
    "stack", "sub", "tanh", "tsum", "upsample2d", "zeros",
]
