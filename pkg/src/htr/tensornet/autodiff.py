"""A small define-by-run reverse-mode autodiff over numpy arrays.

Only the dense operations the actor, critics and context encoder need are
provided.  A :class:`Tensor` records its parents and a closure that pushes
its gradient back to them; :meth:`Tensor.backward` walks the recorded graph
in reverse topological order and accumulates into :class:`Param.grad`.

Nodes that do not depend on any trainable input are never recorded, so code
that runs on plain arrays (rollouts, target networks) pays no tape overhead.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from htr.errors import IllegalStateError, InvalidArgumentError

ArrayLike = Union[np.ndarray, float, int, "Tensor"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_grad")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._grad: Optional[np.ndarray] = None

    # -- basics -----------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph bookkeeping ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # never mutated in place, so aliasing g is safe
        if self._grad is None:
            self._grad = g
        else:
            self._grad = self._grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(param) into every reachable :class:`Param`."""
        if not self.requires_grad or (self._backward is None and not isinstance(self, Param)):
            raise IllegalStateError("backward() needs a scalar produced by recorded operations on parameters")
        if self.data.size != 1:
            raise InvalidArgumentError(f"backward() needs a scalar, got shape {self.shape}")

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

        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node._grad
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g)
            if isinstance(node, Param):
                node.grad += g
            node._grad = None

    # -- arithmetic -------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), neg(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __pow__(self, k: float) -> "Tensor":
        return power(self, k)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)


class Param(Tensor):
    """A named trainable array with a gradient slot."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, values):
        super().__init__(np.array(values, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def values(self) -> np.ndarray:
        return self.data

    @values.setter
    def values(self, v) -> None:
        self.data[...] = v

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitive ops


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: a._accumulate(-g * out * out))


def power(a: Tensor, k: float) -> Tensor:
    out = a.data**k
    return _record(out, (a,), lambda g: a._accumulate(g * k * a.data ** (k - 1)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgumentError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _record(a.data @ b.data, (a, b), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _record(a.data[idx], (a,), bw)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Each row of a 2-D tensor repeated ``k`` times consecutively."""
    n, d = a.shape

    def bw(g):
        a._accumulate(g.reshape(n, k, d).sum(axis=1))

    return _record(np.repeat(a.data, k, axis=0), (a,), bw)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; the backward pass scatter-adds."""
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _record(a.data[index], (a,), bw)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _record(out, ts, bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: a._accumulate(g * 0.5 / out))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record(out, (a,), lambda g: a._accumulate(g * sig))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is passed through only strictly inside the range."""
    mask = (a.data > lo) & (a.data < hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: a._accumulate(g * mask))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return _record(np.minimum(a.data, b.data), (a, b), bw)


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()
