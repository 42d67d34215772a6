"""Minimal reverse-mode autodiff engine used by the learning models."""

from .distributions import (
    LOG_2PI,
    categorical_log_prob,
    categorical_log_prob_logits,
    gaussian_log_prob,
    reparameterize,
    standard_normal_log_prob,
)
from .layers import (
    activation,
    conv2d,
    dense,
    identity,
    log_softmax,
    max_pool2d,
    max_unpool2d,
    relu,
    softmax,
    transpose_conv2d,
    unpool_transpose_conv2d,
)
from .optim import AdamState, adam_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    checked,
    concat,
    div,
    exp,
    is_checked,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    pick,
    reshape,
    set_checked,
    sqrt,
    square,
    sub,
    take,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
