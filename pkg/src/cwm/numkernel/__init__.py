from . import _alloc  # noqa: F401  (allocator tuning side effect)
from .checkpoint import FORMAT_VERSION, config_hash, load_checkpoint, save_checkpoint
from .optim import NonFiniteGradient, OptimState, adamw_step, init_state
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    broadcast_to,
    gather,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    reshape,
    scatter,
    sigmoid,
    softmax,
    sub,
    sum_,
    topological_order,
    transpose,
)

__all__ = [
    "FORMAT_VERSION", "NonFiniteGradient", "OptimState", "ShapeError", "Tensor",
    "adamw_step", "add", "backward", "broadcast_to", "config_hash", "gather", "gelu",
    "init_state", "layer_norm", "load_checkpoint", "log", "matmul", "mean", "mse", "mul",
    "no_grad", "reshape", "save_checkpoint", "scatter", "sigmoid", "softmax", "sub",
    "sum_", "topological_order", "transpose",
]
