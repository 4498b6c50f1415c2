"""Small dense autodiff core: tensors, the layer primitives the model needs, Adam."""

from .checkpoint import CheckpointError
from .gradcheck import GradCheckError, grad_check, relative_error
from .ops import (
    DegenerateBatchError,
    add,
    avg_pool2d,
    batch_norm,
    concat,
    conv1d_depthwise,
    conv2d,
    exp,
    flatten,
    l2_normalize,
    leaky_relu,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    square,
    sub,
    take_along_rows,
    transpose,
)
from .ops import sum as sum_
from .optim import Adam, OptimizerError, ParameterGroup, adam_step
from .tensor import DimensionError, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "Adam",
    "CheckpointError",
    "DegenerateBatchError",
    "DimensionError",
    "GradCheckError",
    "OptimizerError",
    "ParameterGroup",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "avg_pool2d",
    "batch_norm",
    "concat",
    "conv1d_depthwise",
    "conv2d",
    "exp",
    "flatten",
    "grad_check",
    "grad_enabled",
    "l2_normalize",
    "leaky_relu",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relative_error",
    "relu",
    "reshape",
    "square",
    "sub",
    "sum_",
    "take_along_rows",
    "transpose",
]
