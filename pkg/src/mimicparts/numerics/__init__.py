from .tensor import (
    NonFiniteError,
    Tape,
    TapeConsumedError,
    Tensor,
    absolute,
    active_tape,
    add,
    as_tensor,
    backward,
    check_finite_enabled,
    concat,
    conv1d,
    cos,
    cosine_similarity,
    div,
    exp,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    power,
    primitive,
    relu,
    repeat,
    reshape,
    set_check_finite,
    sigmoid,
    sin,
    smooth_l1,
    softmax,
    split,
    sqrt,
    stack,
    stop_gradient,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .serialize import FormatError, read_container, read_tensor, write_container, write_tensor

__all__ = [name for name in dir() if not name.startswith("_")]
