"""Dense float64 tensor with tape-based reverse-mode differentiation.

Every differentiable operation appends one record to the active
:class:`GradTape`. :func:`backward` replays the tape in reverse execution
order, so each recorded op is visited exactly once and gradients of tensors
used more than once are summed.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import RankError, ShapeError

DTYPE = np.float64


class Tensor:
    """N-dimensional float64 array plus an optional gradient slot.

    ``data`` is a C-contiguous numpy array, so the flat row-major buffer is
    ``data.ravel()``. Leaf tensors (created directly, not by an op) receive
    ``grad`` after :func:`backward`.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.is_leaf = True

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered log of executed differentiable operations."""

    def __init__(self) -> None:
        self.ops: list[_Op] = []

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, op: _Op) -> None:
        self.ops.append(op)

    def clear(self) -> None:
        self.ops.clear()


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = GradTape()
        self.enabled = True
        self.flops: list[int] | None = None


_state = _State()


def current_tape() -> GradTape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def use_tape(tape: GradTape):
    """Record into ``tape`` instead of the thread's default tape."""
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def count_flops():
    """Accumulate multiply-add based flop counts of matmul-like ops.

    Yields a one-element list whose entry is the running total.
    """
    prev = _state.flops
    counter = [0]
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


def add_flops(n: int) -> None:
    if _state.flops is not None:
        _state.flops[0] += int(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(name: str, data: np.ndarray, inputs: Iterable[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as an op output and record the op when a gradient is needed."""
    out = Tensor(data)
    inputs = tuple(inputs)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _state.tape.record(_Op(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate into any existing ``.grad``. The tape is
    cleared afterwards.
    """
    if loss.size != 1:
        raise RankError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    tape = tape if tape is not None else _state.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def deliver(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    if loss.is_leaf:
        deliver(loss, grads.pop(id(loss)))
    try:
        for op in reversed(tape.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is not None:
                    deliver(t, gi)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result("mul", a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_result("div", out, (a, b),
                       lambda g: (_unbroadcast(g / b.data, a.shape),
                                  _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return make_result("pow", a.data ** exponent, (a,),
                       lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result("mean", np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(a.shape)} into {list(shape)}") from exc
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result("transpose", out, (a,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[index])

    basic = _is_basic_index(index)

    def bwd(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", out, (a,), bwd)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[list(x.shape) for x in tensors]} disagree")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        return tuple(np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
                     for i in range(len(tensors)))

    return make_result("concat", out, tensors, bwd)


def split(a, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal chunks along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"axis {axis} of size {n} does not split into {sections} equal parts")
    step = n // sections
    idx = [slice(None)] * a.ndim
    parts = []
    for i in range(sections):
        idx[axis] = slice(i * step, (i + 1) * step)
        parts.append(getitem(a, tuple(idx)))
    return parts


def roll(a, shift, axis) -> Tensor:
    a = as_tensor(a)
    out = np.roll(a.data, shift, axis)
    back = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return make_result("roll", out, (a,), lambda g: (np.roll(g, back, axis),))


def take(table, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (axis 0) at integer ``index`` of any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)
    out = table.data[index]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result("take", out, (table,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]`` with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(
            f"matmul batch dimensions not broadcastable: {list(a.shape)} @ {list(b.shape)}") from exc
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    add_flops(2 * int(np.prod(batch, dtype=np.int64)) * m * k * n)
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", out, (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """``x[..., in] @ weight[out, in].T + bias[out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} vs weight {list(weight.shape)}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    add_flops(2 * x2.shape[0] * weight.shape[0] * weight.shape[1])
    out = x2 @ weight.data.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)
    out = out.reshape(lead + (weight.shape[0],))

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result("linear", out, inputs, bwd)
