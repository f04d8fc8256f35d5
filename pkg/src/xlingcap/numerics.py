"""Dense tensors with reverse-mode automatic differentiation and Adam.

The engine is eager: every primitive computes its value immediately and,
when gradients are enabled and any input requires them, appends a record to
a global tape.  ``backward`` walks the tape in exact reverse recording
order, accumulating gradients into every tensor that requires them, then
clears the tape.

Precision is a process-global switch: float32 for training, float64 for
gradient-check suites (see ``precision``).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.recording = True
        _state.debug = False
        _state.tape = []
    return _state


def get_dtype():
    return _st().dtype


def set_precision(bits) -> None:
    """Set the global float width; accepts 32/64 or 'float32'/'float64'."""
    table = {32: np.float32, 64: np.float64,
             "float32": np.float32, "float64": np.float64}
    if bits not in table:
        raise ContractError(f"unsupported precision {bits!r}")
    _st().dtype = table[bits]


@contextlib.contextmanager
def precision(bits):
    st = _st()
    prev = st.dtype
    set_precision(bits)
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    st = _st()
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Check every op output for NaN/Inf while the block is active."""
    st = _st()
    prev = st.debug
    st.debug = enabled
    try:
        yield
    finally:
        st.debug = prev


def tape_size() -> int:
    return len(_st().tape)


def reset_tape() -> None:
    _st().tape.clear()


class Tensor:
    """A dense array plus an optional gradient of identical shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_st().dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item: tensor is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; scalars are folded in as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    st = _st()
    if st.debug and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op}: non-finite value in output")
    out = Tensor(out_data)
    if st.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.tape.append((out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the active tape.

    Every requires_grad tensor reached from the loss accumulates its
    gradient; the tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError("backward: loss must be scalar")
    st = _st()
    if not st.tape:
        raise ContractError("backward: tape is empty")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(st.tape):
        if out.grad is not None:
            fn(out.grad)
    st.tape.clear()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _finish("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _finish("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b_data, a.shape))
        _accumulate(b, _unbroadcast(g * a_data, b.shape))

    return _finish("mul", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (n,k)@(k,m), (k,)@(k,m), (n,k)@(k,), (B,n,k)@(k,m)
    and (B,n,k)@(B,k,m).  Inner dimensions must agree exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul: operands must have ndim >= 1")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dims differ, {ad.shape} @ {bd.shape}")
    if ad.ndim > 3 or bd.ndim > 3 or (bd.ndim == 3 and ad.ndim != 3):
        raise ShapeError(f"matmul: unsupported shapes {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if ad.ndim == 2 else g * bd
            elif ad.ndim == 1:
                ga = bd @ g
            else:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            _accumulate(a, ga)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif bd.ndim == 1:
                gb = ad.T @ g
            elif ad.ndim == 3 and bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            _accumulate(b, gb)

    return _finish("matmul", out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(t, g[tuple(sl)])
            offset += n

    return _finish("concat", out, tensors, bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape

    def bw(g):
        _accumulate(a, g.reshape(in_shape))

    return _finish("reshape", out, (a,), bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape).copy())
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gx, in_shape).copy())

    return _finish("sum", out, (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, in_shape).copy())
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gx / count, in_shape).copy())

    return _finish("mean", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    y = out

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _finish("softmax", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _finish("relu", out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = np.where(a.data > 0, a.data, slope * a.data)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)

    def bw(g):
        _accumulate(a, g * scale)

    return _finish("leaky_relu", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    y = out

    def bw(g):
        _accumulate(a, g * y * (1.0 - y))

    return _finish("sigmoid", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    y = out

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _finish("tanh", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    out = np.log(a.data)
    x = a.data

    def bw(g):
        _accumulate(a, g / x)

    return _finish("log", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if np.any(np.isinf(out)):
        raise NumericError("exp: overflow")
    y = out

    def bw(g):
        _accumulate(a, g * y)

    return _finish("exp", out, (a,), bw)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute elementwise differences, as a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.abs(diff).sum()
    sign = np.sign(diff)

    def bw(g):
        _accumulate(a, g * sign)
        _accumulate(b, -g * sign)

    return _finish("l1_distance", out, (a, b), bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of ``table`` by integer index array (any index shape)."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _finish("gather_rows", out, (table,), bw)


class AdamState:
    """Bias-corrected Adam moments for a named parameter set."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractError("adam: lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Apply one bias-corrected Adam update in place; returns ``params``.

    ``grads`` maps the same names to arrays; parameters without an entry
    (or with ``None``) are skipped.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
