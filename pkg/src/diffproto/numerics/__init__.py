"""Minimal tensor arithmetic with reverse-mode autodiff and portable RNG."""

from .rng import ALGORITHM, RngStream
from .tensor import (
    FLOAT_DTYPES,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy_with_logits,
    gather_rows,
    gaussian,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    narrow,
    neg,
    normalize_rows,
    pairwise_sqdist,
    parameter,
    reshape,
    softmax,
    sub,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "ALGORITHM",
    "RngStream",
    "FLOAT_DTYPES",
    "NumericsError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cross_entropy_with_logits",
    "gather_rows",
    "gaussian",
    "gelu",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mul",
    "narrow",
    "neg",
    "normalize_rows",
    "pairwise_sqdist",
    "parameter",
    "reshape",
    "softmax",
    "sub",
    "tmean",
    "transpose",
    "tsum",
]
