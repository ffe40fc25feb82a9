"""Differentiable ops.  Reductions accumulate sequentially along the last axis
through numpy; nothing here is multithreaded beyond what BLAS does."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError, TokenIndexError
from .tensor import Tensor, make_result

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` act as a batch."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: A{a.shape} and B{b.shape} have mismatched inner extents")
    k = b.shape[0]

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return make_result(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fused ``x @ w + bias``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: x{x.shape} and W{w.shape} have mismatched inner extents")
    out = x.data @ w.data
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias{bias.shape} does not match W{w.shape}")
        out += bias.data
    k, n = w.shape

    def back(g):
        g2 = g.reshape(-1, n)
        gx = g @ w.data.T
        gw = x.data.reshape(-1, k).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, back, "linear")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = x2 * 0.044715
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def back(g):
        d = 1.0 - th * th
        d *= xd
        d *= x2 * (3 * 0.044715 * _GELU_C) + _GELU_C
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return make_result(out, (x,), back, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gain{gamma.shape}/bias{beta.shape} vs input{x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = rstd * (dxhat - m1 - xhat * m2)
        lead = g.reshape(-1, d)
        return gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return make_result(out, (x, gamma, beta), back, "layer_norm")


def embedding(table: Tensor, idx) -> Tensor:
    """Row gather ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TokenIndexError(f"embedding: index out of range [0, {n})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(table.data[idx], (table,), back, "embedding")


def embed_sum(tables: Sequence[Tensor], indices: Sequence[np.ndarray]) -> Tensor:
    """``out[...] = sum_t tables[t][indices[t][...]]`` where index -1 contributes nothing."""
    if len(tables) != len(indices) or not tables:
        raise ContractError("embed_sum: need one index array per table")
    d = tables[0].shape[1]
    shape = np.asarray(indices[0]).shape
    out = np.zeros(shape + (d,), dtype=tables[0].dtype)
    masks = []
    for table, idx in zip(tables, indices):
        idx = np.asarray(idx)
        if idx.shape != shape or table.shape[1] != d:
            raise DimensionError("embed_sum: index arrays / table widths disagree")
        mask = idx >= 0
        if idx.size and idx.max() >= table.shape[0]:
            raise TokenIndexError(f"embed_sum: index out of range [0, {table.shape[0]})")
        out[mask] += table.data[idx[mask]]
        masks.append((mask, idx[mask]))

    def back(g):
        grads = []
        for table, (mask, rows) in zip(tables, masks):
            gt = np.zeros_like(table.data)
            np.add.at(gt, rows, g[mask])
            grads.append(gt)
        return grads

    return make_result(out, tuple(tables), back, "embed_sum")


def select(x: Tensor, idx, axis: int = 1) -> Tensor:
    """Take entries ``idx`` (1-D, distinct) along ``axis``."""
    idx = np.asarray(idx)

    def back(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = idx
        gx[tuple(sl)] = g
        return (gx,)

    return make_result(np.take(x.data, idx, axis=axis), (x,), back, "select")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted logsumexp (plain numpy; no graph)."""
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(logits: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    y = _softmax(logits.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (logits,), back, "softmax_rows")


def log_softmax(logits: Tensor) -> Tensor:
    out = log_softmax_array(logits.data)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (logits,), back, "log_softmax")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """``logsumexp(logits) - logits[target]`` per row.

    ``logits[V]`` with an int target gives a scalar; ``logits[..., V]`` with an
    integer array of the leading shape gives one loss per row.
    """
    target = np.asarray(target)
    v = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets{target.shape} vs logits{logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= v):
        raise TokenIndexError(f"cross_entropy: target outside [0, {v})")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(shifted, target[..., None], axis=-1)
    out = (lse - picked)[..., 0]

    def back(g):
        p = np.exp(shifted - lse)
        np.put_along_axis(p, target[..., None],
                          np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)

    return make_result(out, (logits,), back, "cross_entropy")


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def _causal_mask(length: int, dtype) -> np.ndarray:
    m = np.zeros((length, length), dtype=dtype)
    m[np.triu_indices(length, 1)] = -np.inf
    return m


def causal_attention(qkv: Tensor, n_heads: int) -> Tensor:
    """Causal scaled-dot-product self-attention on packed projections.

    ``qkv`` is ``[B, L, 3d]`` laid out as ``[q | k | v]``; returns ``[B, L, d]``.
    Row ``i`` attends to rows ``0..i`` only.
    """
    if qkv.ndim != 3 or qkv.shape[-1] % (3 * n_heads):
        raise DimensionError(f"causal_attention: qkv{qkv.shape} not divisible into {n_heads} heads")
    b, length, three_d = qkv.shape
    d = three_d // 3
    dh = d // n_heads
    sc = qkv.dtype.type(1.0 / math.sqrt(dh))
    heads = qkv.data.reshape(b, length, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = heads[0], heads[1], heads[2]
    s = (q @ k.transpose(0, 1, 3, 2)) * sc + _causal_mask(length, qkv.dtype)
    p = _softmax(s)
    o = p @ v
    out = o.transpose(0, 2, 1, 3).reshape(b, length, d)

    def back(g):
        go = g.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ go
        gp = go @ v.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        packed = np.stack([gq, gk, gv])  # [3, B, H, L, dh]
        return (packed.transpose(1, 3, 0, 2, 4).reshape(b, length, three_d),)

    return make_result(out, (qkv,), back, "causal_attention")
