"""Float32 tensors with a minimal reverse-mode tape.

Operations always compute eagerly on numpy arrays. When a :class:`Tape` is
active and at least one operand requires gradients, the operation is also
recorded so that :func:`backward` can walk it in reverse. A tape is meant to
live for a single forward pass.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum()
    >>> float(backward(loss, [x])[0][0])
    6.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GradientError, NonFiniteError, ShapeError

DTYPE = np.float32

_active: list["Tape"] = []


def tape_active() -> bool:
    return bool(_active)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """Immutable float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_tape")
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "tensor"):
        if _op == "tensor":
            arr = np.array(data, dtype=DTYPE)
        else:
            arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, _op)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]
    name: str


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, vjp, name: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    out = Tensor(data, _op=name)
    if _active and any(t.requires_grad for t in inputs):
        tape = _active[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, vjp, name))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def wide_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product accumulated in float64, rounded once to float32.

    ``b`` may already be float64; callers that reuse weights keep a widened copy.
    """
    return (np.asarray(a, np.float64) @ np.asarray(b, np.float64)).astype(DTYPE)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    # float32 BLAS drifts several ulp from the exact sum; the backward pass can
    # live with that, the forward value should not
    return _emit(wide_matmul(a.data, b.data), (a, b), vjp, "matmul")


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=False)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(DTYPE),)

    return _emit(np.asarray(out), (x,), vjp, "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _emit(
        np.asarray(x.data.mean(dtype=DTYPE)),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=DTYPE),),
        "mean",
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,), "exp")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, parts, vjp, "concat")


def take_rows(table, index) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"row index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), vjp, "take_rows")


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Raises :class:`GradientError` for a non-scalar loss or when a requested
    tensor does not feed into the loss on the recording tape.
    """
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    tape = loss._tape
    if tape is not None:
        for node in reversed(tape.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.asarray(gi, dtype=DTYPE)
    result = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            raise GradientError(f"{t!r} is not reachable from the loss")
        _check_finite(g, "backward")
        result.append(np.asarray(g, dtype=DTYPE).reshape(t.shape))
    return result


@dataclass
class AdamState:
    """First/second moment buffers for :func:`adam_step`."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(
            m=[np.zeros(np.shape(p), dtype=DTYPE) for p in params],
            v=[np.zeros(np.shape(p), dtype=DTYPE) for p in params],
            **kw,
        )


def adam_step(params, grads, state: AdamState, lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam update; moment buffers in ``state`` advance in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and state must have equal length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
        g = np.asarray(g, dtype=DTYPE)
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"adam_step shape mismatch at slot {i}: {p.shape} vs {g.shape}")
        state.m[i] = (b1 * state.m[i] + (1.0 - b1) * g).astype(DTYPE)
        state.v[i] = (b2 * state.v[i] + (1.0 - b2) * g * g).astype(DTYPE)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append((p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE))
    return out
