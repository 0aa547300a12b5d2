"""Minimal dense-array substrate: tensors, a gradient tape, losses and Adam."""
from .functional import cross_entropy, mse, skew_kl, skew_kl_logits, softmax_rows
from .gradcheck import grad_check
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    causal_mask,
    causal_softmax,
    compute_precision,
    count_flops,
    matmul,
    precision,
    rel_err,
)

__all__ = [
    "AdamState",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "causal_mask",
    "causal_softmax",
    "clip_global_norm",
    "compute_precision",
    "count_flops",
    "cross_entropy",
    "grad_check",
    "matmul",
    "mse",
    "precision",
    "rel_err",
    "skew_kl",
    "skew_kl_logits",
    "softmax_rows",
]
