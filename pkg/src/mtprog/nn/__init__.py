"""Reverse-mode autodiff over float64 arrays and the 3D layer vocabulary."""
from .kernels import BACKEND
from .layers import (
    BatchNorm,
    Conv3d,
    Dense,
    DenseBlock,
    DenseNetLite,
    Module,
    ShapeError,
    Transition,
    avg_pool3d,
    batch_norm,
    conv3d,
    dense,
    dense_block,
    dropout,
    global_avg_pool,
)
from .serialize import FormatError, load_params, save_params
from .tensor import (
    Node,
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    columns,
    concat,
    make_op,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    stable_sigmoid,
    sub,
    tensor_mean,
    tensor_sum,
)
