"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable op returns a :class:`Tensor` that remembers its parent
tensors and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` walks that DAG once in reverse topological order.

Gradient bookkeeping:

* Leaf tensors created with ``requires_grad=True`` (parameters) accumulate
  into ``.grad`` across successive graphs until :func:`zero_grad` is called.
* A graph can be backpropagated only once; afterwards its interior nodes are
  released and a second ``backward`` on the same root raises ContractError.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def finite_checks_enabled() -> bool:
    return getattr(_local, "check_finite", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the NaN/Inf check performed after every op (on by default)."""
    prev = finite_checks_enabled()
    _local.check_finite = enabled
    try:
        yield
    finally:
        _local.check_finite = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A row-major numpy array plus the autodiff record that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op",
                 "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    # Arithmetic sugar; the ops live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(_lift(other, self)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(_lift(other, self), ops.neg(self))

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn,
                op: str) -> Tensor:
    """Wrap an op output, recording the graph edge only when needed."""
    if finite_checks_enabled() and not np.isfinite(data).all():
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{op}: {bad} non-finite value(s) in output of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._released = False
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradients, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss._released:
        raise ContractError("backward() already ran on this graph; rebuild the forward pass")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
