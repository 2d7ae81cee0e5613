"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (one per thread).
Outside a tape, operations evaluate eagerly and track nothing, which is how
inference passes run.
"""

from __future__ import annotations

import threading

import numpy as np

from . import _accel

EPS = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_tape")

    def __init__(self, values, requires_grad=False, name=""):
        self.values = np.array(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None if self.grad is None else np.zeros_like(self.values)

    def detach(self):
        return Tensor(self.values, name=self.name)

    def backward(self):
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)


class Tape:
    """Ordered record of operations; backward replays it in reverse."""

    def __init__(self):
        self.records = []
        self._produced = set()

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))
        self._produced.add(id(out))
        out._tape = self

    def backward(self, loss):
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss is not on this tape")
        adjoint = {id(loss): np.ones_like(loss.values)}
        leaf_grads, leaf_tensors = {}, {}
        for out, inputs, backward_fn in reversed(self.records):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for t, gin in zip(inputs, backward_fn(g)):
                if gin is None or not t.requires_grad:
                    continue
                target = adjoint if id(t) in self._produced else leaf_grads
                prev = target.get(id(t))
                target[id(t)] = gin if prev is None else prev + gin
                if target is leaf_grads:
                    leaf_tensors[id(t)] = t
        # one addition per leaf per pass keeps repeated passes exactly additive
        for key, t in leaf_tensors.items():
            g = leaf_grads[key]
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64)
            else:
                t.grad += g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(values, inputs, backward_fn):
    out = Tensor(values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def add_rowwise(x, bias):
    """``x[i, :] + bias`` for every row; the only broadcast supported."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_rowwise: bias {bias.shape} does not fit rows of {x.shape}")
    return _emit(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=0)))


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _emit(x.values * c, (x,), lambda g: (g * c,))


def exp(x):
    x = _as_tensor(x)
    out_values = np.exp(x.values)
    return _emit(out_values, (x,), lambda g: (g * out_values,))


def log(x):
    """Natural log with inputs in (0, EPS) raised to EPS; non-positive inputs are an error."""
    x = _as_tensor(x)
    if np.any(x.values <= 0.0):
        raise DomainError("log of a non-positive value")
    clamped = np.maximum(x.values, EPS)
    live = x.values >= EPS
    return _emit(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def relu(x):
    x = _as_tensor(x)
    on = x.values > 0.0
    return _emit(np.where(on, x.values, 0.0), (x,), lambda g: (g * on,))


def clamp_min(x, lo):
    """``max(x, lo)`` elementwise; clamped entries pass no gradient."""
    x = _as_tensor(x)
    live = x.values >= lo
    return _emit(np.where(live, x.values, lo), (x,), lambda g: (g * live,))


def sum(x):
    x = _as_tensor(x)
    return _emit(np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    x = _as_tensor(x)
    n = x.values.size
    return scale(sum(x), 1.0 / n)


def take_rows(x, rows):
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, rows, g)
        return (gx,)

    return _emit(x.values[rows], (x,), backward)


def pick(x, cols):
    """Gather ``x[i, cols[i]]`` into a vector."""
    x = _as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    if x.values.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"pick: {cols.shape} column ids for matrix {x.shape}")
    idx = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[idx, cols] = g
        return (gx,)

    return _emit(x.values[idx, cols], (x,), backward)


def log_softmax(z):
    """Row-wise log-softmax with max subtraction."""
    z = _as_tensor(z)
    if z.values.ndim != 2:
        raise DimensionError(f"log_softmax expects a matrix, got {z.shape}")
    if not np.all(np.isfinite(z.values)):
        raise DomainError("log_softmax: non-finite input")
    logp = _accel.log_softmax_rows(np.ascontiguousarray(z.values))
    return _emit(logp, (z,), lambda g: (_accel.log_softmax_rows_backward(logp, np.ascontiguousarray(g)),))


def concat_rows(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: {a.shape} and {b.shape}")
    n = a.shape[0]
    return _emit(np.vstack([a.values, b.values]), (a, b), lambda g: (g[:n], g[n:]))


def sgd_step(params, lr):
    """``p <- p - lr * p.grad`` for every parameter, then zero the grads."""
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '?'} has no gradient")
    for p in params:
        p.values -= lr * p.grad
        p.grad = np.zeros_like(p.values)
