from .tensor import (
    DTYPE,
    DimensionError,
    MacCounter,
    Tensor,
    UnknownParameterError,
    add,
    as_tensor,
    backward,
    concat,
    count_macs,
    cross_entropy,
    gelu,
    getitem,
    grad_of,
    layer_norm,
    linear,
    log_softmax_np,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    norm2,
    reshape,
    scale,
    scatter_last,
    softmax,
    transpose,
    tsum,
)

__all__ = [
    "DTYPE", "DimensionError", "MacCounter", "Tensor", "UnknownParameterError",
    "add", "as_tensor", "backward", "concat", "count_macs", "cross_entropy", "gelu",
    "getitem", "grad_of", "layer_norm", "linear", "log_softmax_np", "matmul", "mean",
    "mul", "neg", "no_grad", "norm2", "reshape", "scale", "scatter_last", "softmax", "transpose", "tsum",
]
