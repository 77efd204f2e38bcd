"""Minimal reverse-mode differentiation substrate."""

from .optim import (
    CheckpointError,
    ParameterStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    scheduled_lr,
)
from .tensor import (
    KL_FLOOR,
    OPS,
    ShapeError,
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat,
    dot,
    euclidean_distance,
    exp,
    forward_op,
    index_select,
    is_grad_enabled,
    kl_divergence,
    layer_norm,
    log,
    matmul,
    max_pool_rows,
    mean,
    mean_rows,
    mse,
    mul,
    no_grad,
    numeric_gradient,
    relative_error,
    relu,
    reshape,
    scale,
    segment_mean,
    sigmoid,
    softmax,
    sub,
    sum,
    take_rows,
    tanh,
    transpose,
)

__all__ = [
    "CheckpointError", "KL_FLOOR", "OPS", "ParameterStore", "ShapeError", "Tensor",
    "adam_step", "add", "backward", "bce_with_logits", "concat", "dot", "euclidean_distance",
    "exp", "forward_op", "index_select", "is_grad_enabled", "kl_divergence", "layer_norm",
    "load_checkpoint", "log", "matmul", "max_pool_rows", "mean", "mean_rows", "mse", "mul",
    "no_grad", "numeric_gradient", "relative_error", "relu", "reshape", "save_checkpoint",
    "scale", "scheduled_lr", "segment_mean", "sigmoid", "softmax", "sub", "sum", "take_rows",
    "tanh", "transpose",
]
