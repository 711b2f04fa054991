"""Minimal float64 tensor engine: tape-based reverse-mode autodiff and Adam."""

from .gradcheck import GradCheckReport, check_gradients, relative_error
from .optim import AdamState, adam_step, warmup_inverse_sqrt
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    custom_op,
    div,
    embedding_lookup,
    evaluate,
    exp,
    gelu,
    grad,
    grad_enabled,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
