"""Rank-4 tensors with reverse-mode differentiation on an explicit tape.

Every value flowing through the networks is a (N, C, H, W) float array.
Storage is float32 by default; float64 is accepted so numerical tests can
run a high-precision shadow of the same code path.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


class TapeError(RuntimeError):
    """The gradient tape was used outside its contract."""


_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A rank-4 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (N,C,H,W), got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Gradient tape


_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Ordered record of backward rules for one forward pass.

    Single-writer: one forward/backward sequence per tape. A second
    backward on the same tape is rejected.
    """

    def __init__(self):
        self._rules = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.remove(self)
        return False

    def record(self, rule):
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        self._rules.append(rule)

    def backward(self, loss):
        if self._consumed:
            raise TapeError("second backward pass on the same tape; run a new forward first")
        if loss.shape != (1, 1, 1, 1):
            raise TapeError(f"loss must be scalar-shaped (1,1,1,1), got {loss.shape}")
        if loss.grad is None:
            raise TapeError("loss does not participate in differentiation")
        self._consumed = True
        loss.grad[...] = 1
        for rule in reversed(self._rules):
            rule()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss, tape):
    """Populate .grad for every tensor reachable from ``loss`` on ``tape``."""
    tape.backward(loss)


def record_op(inputs, output, rule):
    """Register a backward rule if a tape is active and any input needs grads.

    Gradient buffers for all participating tensors are zero-allocated here,
    at forward time, so accumulation across branches is always into a live
    buffer.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for t in (*inputs, output):
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    output.requires_grad = True
    tape.record(rule)


# ---------------------------------------------------------------------------
# Elementary operations


def tensor_full(shape, value, dtype=np.float32):
    """New tensor of the given shape with every element equal to value."""
    if len(shape) != 4 or any(int(d) < 1 for d in shape):
        raise ShapeError(f"invalid tensor shape {shape}")
    return Tensor(np.full(tuple(int(d) for d in shape), value, dtype=dtype))


def from_array(arr, requires_grad=False):
    return Tensor(np.array(arr, copy=True), requires_grad=requires_grad)


def _broadcast_axes(a_shape, b_shape):
    """Axes of b that are broadcast against a; only (N,C,1,1) / (1,C,1,1)."""
    if a_shape == b_shape:
        return ()
    n, c, h, w = a_shape
    if b_shape == (n, c, 1, 1):
        return (2, 3)
    if b_shape == (1, c, 1, 1):
        return (0, 2, 3)
    raise ShapeError(f"shapes {a_shape} and {b_shape} are not compatible "
                     "(only (N,C,1,1) or (1,C,1,1) broadcasts are supported)")


def _reduce_to(grad, shape, axes):
    if not axes:
        return grad
    return grad.sum(axis=axes, keepdims=True).astype(grad.dtype)


def elementwise(op, a, b):
    """Elementwise add/mul/sub; b may broadcast as (N,C,1,1) or (1,C,1,1)."""
    axes = _broadcast_axes(a.shape, b.shape)
    if op == "add":
        out = Tensor(a.data + b.data)
    elif op == "sub":
        out = Tensor(a.data - b.data)
    elif op == "mul":
        out = Tensor(a.data * b.data)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")

    def rule():
        g = out.grad
        if op == "add":
            a.grad += g
            b.grad += _reduce_to(g, b.shape, axes)
        elif op == "sub":
            a.grad += g
            b.grad -= _reduce_to(g, b.shape, axes)
        else:
            a.grad += g * b.data
            b.grad += _reduce_to(g * a.data, b.shape, axes)

    record_op((a, b), out, rule)
    return out


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def concat_channels(parts):
    """Concatenate along the channel axis; backward splits the same bands."""
    parts = list(parts)
    if len(parts) < 2:
        raise ShapeError("concat_channels needs at least 2 parts")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat parts disagree on N/H/W: {ref} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    bands = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule():
        for p, lo, hi in zip(parts, bands[:-1], bands[1:]):
            p.grad += out.grad[:, lo:hi]

    record_op(tuple(parts), out, rule)
    return out


def split_channels(x, widths):
    """Band extraction inverse to concat_channels (forward-only helper)."""
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"widths {widths} do not sum to {x.shape[1]} channels")
    bands = np.cumsum([0] + list(widths))
    return [Tensor(x.data[:, lo:hi].copy()) for lo, hi in zip(bands[:-1], bands[1:])]


def sum_all(x):
    """Sum over every element, returning a (1,1,1,1) scalar tensor."""
    out = Tensor(np.sum(x.data).reshape(1, 1, 1, 1))

    def rule():
        x.grad += out.grad.reshape(())

    record_op((x,), out, rule)
    return out


def mean_all(x):
    out = Tensor(np.mean(x.data).reshape(1, 1, 1, 1))
    n = x.data.size

    def rule():
        x.grad += out.grad.reshape(()) / n

    record_op((x,), out, rule)
    return out


def scale_by_map(x, m):
    """Multiply x (N,C,H,W) by a per-pixel map m of shape (N,1,H,W)."""
    n, _, h, w = x.shape
    if m.shape != (n, 1, h, w):
        raise ShapeError(f"map shape {m.shape} does not match {x.shape}")
    out = Tensor(x.data * m.data)

    def rule():
        x.grad += out.grad * m.data
        m.grad += (out.grad * x.data).sum(axis=1, keepdims=True)

    record_op((x, m), out, rule)
    return out


def check_finite(t, context=""):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values produced{': ' + context if context else ''}")
    return t
