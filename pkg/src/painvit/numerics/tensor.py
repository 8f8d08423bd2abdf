"""Dense float64 tensor with reverse-mode differentiation.

The engine is deliberately small: a ``Tensor`` wraps a ``numpy`` array and
remembers how it was produced, and ``Tensor.backward`` walks the implicit
operation graph once in reverse topological order.  Every differentiable
operation returns a fresh tensor; inputs are never mutated, so concurrent
reads of already-built tensors are safe.

Gradients accumulate: calling ``backward`` twice without ``zero_grad``
doubles the gradient of every reachable tensor.  Internally each backward
pass uses its own buffers, so repeated calls stay mathematically correct.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import ContractError, DimensionError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# A vjp maps the output gradient to [(parent, parent_gradient), ...].
Vjp = Callable[[np.ndarray], list]

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction for inference."""

    def __enter__(self):
        global _grad_enabled
        self._previous = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._previous
        return False


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Vjp] = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple, op: str, vjp: Vjp) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
            out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` for every gradient-tracking tensor reachable here.

        The root must be a scalar (single element).  Each graph node is
        visited exactly once per call; repeated calls accumulate.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {self.shape}"
            )
        order = _topo_order(self)
        buffers: dict = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = buffers.get(id(node))
            if grad is None or node._vjp is None:
                continue
            for parent, contribution in node._vjp(grad):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                held = buffers.get(key)
                buffers[key] = contribution if held is None else held + contribution
        for node in order:
            if not node.requires_grad:
                continue
            grad = buffers.get(id(node))
            if grad is None:
                continue
            self_grad = np.array(grad, dtype=np.float64, copy=True)
            node.grad = self_grad if node.grad is None else node.grad + self_grad

    # -- operator sugar ---------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the op graph: inputs precede consumers.

    Nodes may be pushed once per consumer; ``visited`` is marked at expansion
    time so that a shared input is finalized only after every branch that
    reaches it has been explored (a push-time mark would misorder diamonds
    with unequal branch lengths).
    """
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return Tensor._result(data, (a, b), "add", vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return Tensor._result(data, (a, b), "mul", vjp)


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def vjp(g):
        return [(a, g * exponent * a.data ** (exponent - 1.0))]

    return Tensor._result(data, (a,), f"pow{exponent}", vjp)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return [(a, g * data)]

    return Tensor._result(data, (a,), "exp", vjp)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def vjp(g):
        return [(a, g / a.data)]

    return Tensor._result(data, (a,), "log", vjp)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def vjp(g):
        return [(a, g * mask)]

    return Tensor._result(data, (a,), "relu", vjp)


# -- reductions -------------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return [(a, np.broadcast_to(g, a.shape))]

    return Tensor._result(data, (a,), "sum", vjp)


def tensor_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation -------------------------------------------------------------


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def vjp(g):
        return [(a, g.reshape(a.shape))]

    return Tensor._result(data, (a,), "reshape", vjp)


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return [(a, g.transpose(inverse))]

    return Tensor._result(data, (a,), "transpose", vjp)


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic (slice/integer) indexing; each source element appears at most once."""
    a = as_tensor(a)
    data = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return [(a, full)]

    return Tensor._result(data, (a,), "getitem", vjp)


def concat(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    extents = [t.shape[axis] for t in ts]

    def vjp(g):
        pieces = np.split(g, np.cumsum(extents)[:-1], axis=axis)
        return list(zip(ts, pieces))

    return Tensor._result(data, tuple(ts), "concat", vjp)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return Tensor._result(data, (a, b), "matmul", vjp)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Affine map over the trailing axis: ``y[..., n] = x[..., k] @ W[k, n] + b``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear input {x.shape} incompatible with weight {weight.shape}"
        )
    data = np.matmul(x.data, weight.data)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear bias {bias.shape} incompatible with weight {weight.shape}"
            )
        data = data + bias.data
        parents.append(bias)

    k, n = weight.shape

    def vjp(g):
        g2 = g.reshape(-1, n)
        x2 = x.data.reshape(-1, k)
        out = [
            (x, np.matmul(g, weight.data.T).reshape(x.shape)),
            (weight, x2.T @ g2),
        ]
        if bias is not None:
            out.append((bias, g2.sum(axis=0)))
        return out

    return Tensor._result(data, tuple(parents), "linear", vjp)


# -- softmax family ----------------------------------------------------------------


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; rows along ``axis`` sum to one."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return [(x, (g - inner) * data)]

    return Tensor._result(data, (x,), "softmax", vjp)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def vjp(g):
        return [(x, g - probs * g.sum(axis=axis, keepdims=True))]

    return Tensor._result(data, (x,), "log_softmax", vjp)
