"""Dense tensors with reverse-mode automatic differentiation.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Calling :func:`backward` walks the tape
in reverse and accumulates gradients into leaf tensors.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class TapeError(RuntimeError):
    pass


@dataclass
class Node:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; nested tapes are not supported.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise TapeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._produced

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._is_leaf = True

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce("mean", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor_from(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False,
                dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor from a shape and a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    values = np.asarray(values, dtype=dtype).reshape(-1)
    if int(np.prod(shape)) != values.size:
        raise ValueError(f"shape {shape} needs {int(np.prod(shape))} values, got {values.size}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape.record(Node(inputs, out, backward_fn))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    # B must broadcast onto A (or A onto B); both directions are accepted as
    # long as numpy broadcasting is well-defined.
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise binary ---------------------------------------------------

def ew_binary(kind: str, a, b) -> Tensor:
    fn = {"add": add, "mul": mul, "sub": sub, "div": div}.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return fn(a, b)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


# -- reductions and shape ops --------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axes {axes}")
    return tuple(sorted(out))


def reduce(kind: str, t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _norm_axes(axes, t.ndim)
    count = int(np.prod([t.shape[a] for a in axes])) if axes else 1
    data = t.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        data = data / t.data.dtype.type(count)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(t.shape))

    def bw(g):
        g = np.reshape(g, kept_shape)
        if kind == "mean":
            g = g / t.data.dtype.type(count)
        return (np.broadcast_to(g, t.shape),)

    return _make(np.asarray(data, dtype=t.dtype), (t,), bw)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        return (np.reshape(g, t.shape),)

    return _make(t.data.reshape(shape), (t,), bw)


# -- elementwise unary ----------------------------------------------------

def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.data)

    def bw(g):
        # d sqrt(x) at x = 0 is taken as 0 so zero tensors stay finite
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0).astype(t.dtype)
        return (g * d,)

    return _make(out, (t,), bw)


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return _make(out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    return _make(np.log(t.data), (t,), lambda g: (g / t.data,))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return _make(np.where(mask, t.data, 0).astype(t.dtype), (t,), lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # split by sign so neither branch overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(t.dtype)
    return _make(out, (t,), lambda g: (g * out * (1 - out),))


def prelu(t: Tensor, slope: Tensor) -> Tensor:
    """``x`` for ``x >= 0`` else ``slope * x``; ``slope`` is a single scalar."""
    if slope.size != 1:
        raise ValueError("prelu expects one shared scalar slope")
    a = slope.data.reshape(())
    pos = t.data >= 0
    out = np.where(pos, t.data, a * t.data).astype(t.dtype)

    def bw(g):
        gx = g * np.where(pos, 1, a).astype(t.dtype) if t.requires_grad else None
        ga = None
        if slope.requires_grad:
            ga = np.reshape(np.sum(g * np.where(pos, 0, t.data)), slope.shape).astype(slope.dtype)
        return gx, ga

    return _make(out, (t, slope), bw)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (t,), bw)


def frobenius_norm(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Square root of the sum of squares (over ``axes``; all by default)."""
    if t.size == 0:
        raise ValueError("frobenius_norm of an empty tensor")
    return sqrt(reduce("sum", mul(t, t), axes, keepdims))


# -- backward pass --------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise TapeError(f"loss must be a single element, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
