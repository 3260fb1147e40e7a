"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a ``Tensor`` that requires gradients records its operands
and a backward rule on the result. ``Tensor.backward`` walks the recorded
graph in reverse topological order. The graph is owned by the result tensors,
so it is released as soon as the loss goes out of scope.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

EXP_CLIP = 60.0


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. backward on a non-scalar)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to our reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- differentiation -----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError(
                    f"backward() needs a scalar loss, got shape {self.shape}; pass grad explicitly"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        for node, g in _propagate(self, grad).items():
            node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operators -----------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _propagate(root: Tensor, seed: np.ndarray) -> dict:
    """Return {tensor: dL/dtensor} for every requires_grad tensor reachable from root."""
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

    grads: dict[int, np.ndarray] = {id(root): seed}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        out[node] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching any ``.grad``.

    Inputs not connected to ``output`` get a zero array.
    """
    if grad_output is None:
        if output.data.size != 1:
            raise GraphError("grad() of a non-scalar output needs grad_output")
        grad_output = np.ones_like(output.data)
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    table = _propagate(output, grad_output)
    return [table[t] if t in table else np.zeros_like(t.data) for t in inputs]


# Tensor is hashed by identity (default object hash); keep it that way.


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# -- elementwise binary ----------------------------------------------------------


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _lift(a)
        return Tensor._result(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = _lift(a)
        return Tensor._result(a.data - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        b = _lift(b)
        return Tensor._result(a - b.data, (b,), lambda g: (-g,))
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a, s = _lift(a), float(b)
        return Tensor._result(a.data * s, (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


# -- elementwise unary -----------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    """exp with its argument clipped to [-60, 60]; zero gradient outside the clip."""
    a = _lift(a)
    x = a.data
    out = np.exp(np.clip(x, -EXP_CLIP, EXP_CLIP))
    inside = (x >= -EXP_CLIP) & (x <= EXP_CLIP)
    return Tensor._result(out, (a,), lambda g: (g * out * inside,))


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0.0
    return Tensor._result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _lift(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return Tensor._result(out, (a,), lambda g: (g * _np_sigmoid(x),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, neg, sigmoid, tanh, exp, relu, softplus."""
    table = {
        "add": add, "sub": sub, "mul": mul, "neg": neg, "sigmoid": sigmoid,
        "tanh": tanh, "exp": exp, "relu": relu, "softplus": softplus,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias`` for x [N, k], weight [m, k], bias [m]."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return Tensor._result(out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    bias = _lift(bias)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = out + bias.data
    return Tensor._result(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,))


# -- reductions and shape ----------------------------------------------------------


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    shape = a.shape
    return Tensor._result(np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = _lift(a)
    n = a.size
    shape = a.shape
    return Tensor._result(np.mean(a.data), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),))


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = _lift(a)
    shape = a.shape
    out = a.data[index]

    def back(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), back)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of nothing")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return Tensor._result(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive blocks of the given sizes."""
    a = _lift(a)
    ax = axis % a.ndim
    if int(np.sum(sizes)) != a.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover extent {a.shape[ax]}")
    parts = []
    start = 0
    for size in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + size)
        parts.append(take(a, tuple(idx)))
        start += size
    return parts


def tile_rows(v, n: int) -> Tensor:
    """Stack a vector [k] into n identical rows [n, k]."""
    v = _lift(v)
    if v.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got {v.shape}")
    out = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return Tensor._result(out, (v,), lambda g: (g.sum(axis=0),))
