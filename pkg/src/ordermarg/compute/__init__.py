"""Minimal dense-tensor math with reverse-mode autodiff."""
from .gradcheck import check_gradients, numeric_grad, relative_error
from .ops import (add, causal_attention, cross_entropy, embed_sum, embedding, gelu,
                  layer_norm, linear, log_softmax, log_softmax_array, logsumexp, matmul,
                  mean_all, mul, neg, reshape, scale, select, softmax_rows, sum_all)
from .tensor import (Tensor, backward, finite_checks, grad_enabled, no_grad,
                     topological_order, zero_grad)

__all__ = [
    "Tensor", "backward", "zero_grad", "no_grad", "finite_checks", "grad_enabled",
    "topological_order", "check_gradients", "numeric_grad", "relative_error",
    "add", "mul", "neg", "scale", "matmul", "linear", "gelu", "layer_norm", "embedding",
    "embed_sum", "select", "reshape", "softmax_rows", "log_softmax", "log_softmax_array",
    "logsumexp", "cross_entropy", "sum_all", "mean_all", "causal_attention",
]
