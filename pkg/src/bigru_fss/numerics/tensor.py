"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation
records its parents and a closure that maps the output gradient to the
parent gradients; :meth:`Tensor.backward` walks that graph in reverse
topological order.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {32: np.float32, 64: np.float64}
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, where: str = "output"):
        super().__init__(f"{op}: non-finite values in {where}")
        self.op = op


def dtype_for(precision: int):
    try:
        return _DTYPES[int(precision)]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {precision!r}") from None


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def record_branches():
    """Fingerprint the branch taken by every non-smooth op run inside the block.

    ``relu`` contributes its sign mask and ``maxpool2d`` its winning
    indices.  Two evaluations with equal digests lie on the same smooth
    piece of the function, which is what a finite difference needs.
    """
    prev = getattr(_state, "branches", None)
    digest = hashlib.blake2b(digest_size=16)
    _state.branches = digest
    try:
        yield digest
    finally:
        _state.branches = prev


def note_branch(decision: np.ndarray) -> None:
    digest = getattr(_state, "branches", None)
    if digest is not None:
        digest.update(np.ascontiguousarray(decision).tobytes())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if 0 in arr.shape:
            raise ShapeError("Tensor", f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- tape ----------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", "implicit gradient requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError("backward", f"seed gradient {grad.shape} != {self.shape}")

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

        grads: dict[int, np.ndarray] = {id(self): grad}
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
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def make_node(op: str, data: np.ndarray, parents: Iterable[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, checking finiteness and wiring the tape if needed."""
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, f"operand shapes differ: {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_node("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return make_node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return make_node("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_node("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def one_minus(a: Tensor) -> Tensor:
    return make_node("one_minus", 1 - a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return make_node("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_branch(mask)
    return make_node("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node("exp", out, (a,), lambda g: (g * out,))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("div", "denominator (zero)")
    out = a.data / b.data
    return make_node("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "one_minus": one_minus,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op_kind: str, *operands: Tensor) -> Tensor:
    """Dispatch one of the named elementwise kernels."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands)


# -- structural ------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return make_node("reshape", out, (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if np.ndim(out) == 0:
        out = np.asarray(out)
    else:
        out = np.array(out)

    def back(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_node("getitem", out, (a,), back)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack", "empty sequence")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("stack", f"ragged shapes {shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(n)]

    return make_node("stack", out, tensors, back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "empty sequence")
    ref = list(tensors[0].shape)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", f"incompatible shapes {tuple(ref)} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_node("concat", out, tensors, lambda g: np.split(g, bounds, axis=ax))


# -- reductions ------------------------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))
    src = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return make_node("sum", out, (a,), back)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())
    return make_node("mean", out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def log_softmax(a: Tensor, axis: int) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node("log_softmax", out, (a,), back)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
