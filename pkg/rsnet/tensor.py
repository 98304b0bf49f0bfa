"""Tensor values and the reverse-mode tape.

A ``Tensor`` wraps an immutable numpy array. Ops only record themselves when a
``Tape`` is active in the current context, so inference over a built model records
nothing and can run from several threads at once; each training context opens its
own tape.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from rsnet.errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("rsnet_tape", default=None)

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and data.dtype in FLOAT_DTYPES:
        return data
    array = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    if array.dtype not in FLOAT_DTYPES:
        raise TypeError(f"tensors hold float32 or float64 values, got {array.dtype}")
    return array


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic. Broadcasting follows numpy; use ops.elementwise_* for strict shapes.

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class Parameter(Tensor):
    """A trainable tensor with a zero-initialized gradient and a dotted name."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        self.data = value
        if self.grad is None or self.grad.dtype != value.dtype:
            self.grad = np.zeros_like(value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def zero_grads(params) -> None:
    for param in params:
        param.zero_grad()


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of differentiable ops; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))
        node.output._tape = self

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into every reachable leaf's ``grad``.

        Gradients accumulate: calling this twice doubles them until ``zero_grads``.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ShapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.backward(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(f"{node.op}: gradient shape {grad.shape} != input shape {tensor.shape}")
                key = id(tensor)
                if key in self._produced:
                    previous = grads.get(key)
                    grads[key] = grad if previous is None else previous + grad
                elif tensor.grad is None:
                    tensor.grad = grad.astype(tensor.dtype, copy=True)
                else:
                    tensor.grad = tensor.grad + grad

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()


def active_tape() -> Tape | None:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise ShapeError("loss is not connected to a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NumericError(op)


def make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Backward) -> Tensor:
    """Wrap an op result, check it is finite and record it on the active tape."""
    check_finite(op, data)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return make("add", a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return make("sub", a.data - b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return make("mul", a.data * b.data, (a, b),
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make("div", out, (a, b),
                lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return make("maximum", np.maximum(a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return make("minimum", np.minimum(a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make("log", out, (x,), lambda g: (g / x.data,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data > low) & (x.data < high)
    return make("clip", np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make("sum", np.asarray(out), (x,), backward_fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make("mean", np.asarray(out), (x,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return make("getitem", out, (x,), backward_fn)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    out = np.stack([v.data for v in values])
    return make("stack", out, tuple(values), lambda g: tuple(g[i] for i in range(len(values))))
