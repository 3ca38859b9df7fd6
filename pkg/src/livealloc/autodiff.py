"""Reverse-mode automatic differentiation over float64 numpy arrays.

A `Tensor` wraps an ndarray plus an optional gradient accumulator and a
backward closure. Ops build a DAG; `backward()` on a scalar root walks it
in reverse topological order. Ops whose inputs all have
`requires_grad=False` produce constants and record no graph, so forward
passes through frozen parameters (target networks, published policy
snapshots) carry no bookkeeping cost.

Mutating `.data` of a tensor that participates in a live graph invalidates
that graph; finish `backward()` before any in-place parameter update.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self.name = name

    # -- graph plumbing ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A constant view of this tensor (shares the underlying array)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.copy()  # first contribution; copied so later += never aliases
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar root (size-1 tensor).

        Leaf tensors (parameters) accumulate across calls; intermediate
        nodes are reset first, so backward over a graph that shares
        subexpressions with an earlier backward stays correct.
        """
        if self.size != 1:
            raise DimensionError(f"backward() needs a scalar root, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # allocated lazily during backward
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """`x @ w` with `w` 2-D and `x` of any rank >= 2 (leading dims batched)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.data.ndim < 2:
        raise DimensionError(f"matmul expects x rank>=2 and w rank 2, got {x.shape} x {w.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {x.shape} x {w.shape}")
    if x.data.ndim == 2:
        x2 = x.data
        data = x2 @ w.data
    else:
        lead = x.data.shape[:-1]
        x2 = x.data.reshape(-1, x.data.shape[-1])
        data = (x2 @ w.data).reshape(*lead, w.data.shape[1])

    def backward(g: Array) -> None:
        g2 = g if g.ndim == 2 else g.reshape(-1, w.data.shape[1])
        if x.requires_grad:
            gx = g2 @ w.data.T
            x._accumulate(gx if x.data.ndim == 2 else gx.reshape(x.data.shape))
        if w.requires_grad:
            w._accumulate(x2.T @ g2)

    return _make(data, (x, w), backward)


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    data = np.power(x.data, exponent)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g * exponent * np.power(x.data, exponent - 1.0))

    return _make(data, (x,), backward)


# -- shape ops ------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    data = np.broadcast_to(x.data, shape).copy()

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.data.shape))

    return _make(data, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(data, tuple(parts), backward)


def take_rows(x: Tensor, indices: Array) -> Tensor:
    """Gather along axis 0; `indices` may be any integer-array shape.

    Backward scatter-adds into the source rows, so only gathered rows
    receive gradient (sparse embedding-lookup semantics).
    """
    x = as_tensor(x)
    idx = np.asarray(indices)
    data = x.data[idx]

    def backward(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _make(data, (x,), backward)


def grouped_linear(x: Tensor, w: Tensor, b: Tensor, groups: Array) -> Tensor:
    """Per-row affine map through stacked per-group weights.

    `w` has shape (K, in, out) and `b` (K, out); row i uses slice
    groups[i]. Exactly the groups present in the batch receive gradient;
    every other slice's gradient stays identically zero.
    """
    groups = np.asarray(groups, dtype=np.int64)
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n = x.data.shape[0]
    present = np.unique(groups)
    masks = [(g, np.flatnonzero(groups == g)) for g in present]
    data = np.empty((n, w.data.shape[2]))
    for g, idx in masks:
        data[idx] = x.data[idx] @ w.data[g] + b.data[g]

    def backward(gout: Array) -> None:
        if x.requires_grad:
            gx = np.empty_like(x.data)
            for g, idx in masks:
                gx[idx] = gout[idx] @ w.data[g].T
            x._accumulate(gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for g, idx in masks:
                gw[g] = x.data[idx].T @ gout[idx]
            w._accumulate(gw)
        if b.requires_grad:
            gb = np.zeros_like(b.data)
            for g, idx in masks:
                gb[g] = gout[idx].sum(axis=0)
            b._accumulate(gb)

    return _make(data, (x, w, b), backward)


def put_rows(x: Tensor, indices: Array, n_rows: int) -> Tensor:
    """Scatter rows of `x` into a zero (n_rows, ...) tensor; indices unique."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    data = np.zeros((n_rows,) + x.data.shape[1:], dtype=np.float64)
    data[idx] = x.data

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g[idx])

    return _make(data, (x,), backward)


# -- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis=axis)
        x._accumulate(np.broadcast_to(gg, x.data.shape).copy())

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- nonlinearities -------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _make(data, (x,), backward)


def _expit(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = _expit(x.data)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g * data)

    return _make(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g * 0.5 / data)

    return _make(data, (x,), backward)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = as_tensor(x)
    data = np.maximum(x.data, floor)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g * (x.data > floor))

    return _make(data, (x,), backward)
