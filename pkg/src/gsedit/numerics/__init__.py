from .gradcheck import grad_check
from .ops import (
    abs,
    add,
    concat,
    conv2d,
    div,
    elementwise,
    exp,
    index,
    layernorm,
    matmul,
    mean,
    mul,
    resample,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    spatial_gradient,
    sub,
    sum,
    transpose,
    unfold_neighbors,
)
from .optim import AdamState, MissingGradError, adam_step
from .rten import RtenFormatError, atomic_write_bytes, decode_rten, encode_rten, load_rten, save_rten
from .tensor import ComputeGraph, DTensor, GraphError, ShapeError, backward, grad_enabled, no_grad

__all__ = [
    "AdamState",
    "ComputeGraph",
    "DTensor",
    "GraphError",
    "MissingGradError",
    "RtenFormatError",
    "ShapeError",
    "abs",
    "adam_step",
    "add",
    "atomic_write_bytes",
    "backward",
    "concat",
    "conv2d",
    "decode_rten",
    "div",
    "elementwise",
    "encode_rten",
    "exp",
    "grad_check",
    "grad_enabled",
    "index",
    "layernorm",
    "load_rten",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "resample",
    "reshape",
    "save_rten",
    "sigmoid",
    "silu",
    "softmax",
    "softplus",
    "spatial_gradient",
    "sub",
    "sum",
    "transpose",
    "unfold_neighbors",
]
