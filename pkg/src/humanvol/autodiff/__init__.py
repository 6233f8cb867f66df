from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .conv import (
    conv,
    conv2d,
    conv3d,
    conv_output_size,
    conv_transpose,
    conv_transpose_output_size,
    transposed_conv2d,
    transposed_conv3d,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import AdamState, Parameter, ParameterStore, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    amax,
    amin,
    as_tensor,
    clip,
    concat,
    exp,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    mean,
    no_grad,
    pad,
    sigmoid,
    sqrt,
    stack,
    tanh,
    where,
)

__all__ = [
    "AdamState",
    "CheckpointFormatError",
    "Parameter",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "adam_step",
    "amax",
    "amin",
    "as_tensor",
    "check_gradients",
    "clip",
    "concat",
    "conv",
    "conv2d",
    "conv3d",
    "conv_output_size",
    "conv_transpose",
    "conv_transpose_output_size",
    "exp",
    "is_grad_enabled",
    "leaky_relu",
    "load_checkpoint",
    "log",
    "matmul",
    "mean",
    "no_grad",
    "numerical_gradient",
    "pad",
    "relative_error",
    "save_checkpoint",
    "sigmoid",
    "sqrt",
    "stack",
    "tanh",
    "transposed_conv2d",
    "transposed_conv3d",
    "where",
]
