"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and records the primitive that
produced it. Calling :meth:`Tensor.backward` walks the recorded graph in
reverse topological order exactly once, accumulating gradients additively
across fan-out. Everything is float64; masked softmax routes zero gradient
to masked entries by construction.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericsError, ShapeError, UsageError


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Node in the computation graph: a value plus backward plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # -- graph construction --------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad or p._backward is not None for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray):
        # Gradients are never mutated in place, so aliasing is safe here.
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, seed: np.ndarray | None = None):
        """Seed the output gradient (ones by default) and back-propagate."""
        if self._backward is None and not self.requires_grad:
            raise UsageError("backward called on a tensor with no recorded operations")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data) if seed is None else _as_array(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a.data, b.data)

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(a.data / b.data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return Tensor._result(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._result(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NumericsError("log: input has nonpositive entries")

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return Tensor._result(np.maximum(a.data, 0.0), (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor._result(out_data, (a,), backward)


# -- linear algebra / structure --------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._result(a.data @ b.data, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._result(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape) / n)

    return Tensor._result(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return Tensor._result(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for piece, part in zip(np.split(g, splits, axis=axis), parts):
            part._accumulate(piece)

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]

    def backward(g):
        for i, part in enumerate(parts):
            part._accumulate(np.take(g, i, axis=axis))

    return Tensor._result(np.stack([p.data for p in parts], axis=axis), tuple(parts), backward)


def getitem(a, key) -> Tensor:
    """Basic (non-repeating) indexing: ints and slices only."""
    a = _wrap(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return Tensor._result(out_data, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Rows of ``a`` selected by an integer array; scatter-add on backward."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._result(a.data[idx], (a,), backward)


# -- softmax family ----------------------------------------------------------


def masked_softmax(a, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask``; masked entries are exact
    zeros in both the output and its gradient. A fully masked slice yields an
    all-zero slice rather than NaN."""
    a = _wrap(a)
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    except ValueError:
        raise ShapeError(
            f"masked_softmax: mask shape {np.asarray(mask).shape} does not broadcast "
            f"to input {a.data.shape}"
        ) from None
    neg = np.where(mask, a.data, -np.inf)
    peak = neg.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    expd = np.where(mask, np.exp(a.data - peak), 0.0)
    denom = expd.sum(axis=axis, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    out_data = expd / safe

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return Tensor._result(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    return masked_softmax(a, np.ones(a.data.shape, dtype=bool), axis=axis)


# -- norms / similarity ------------------------------------------------------


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm; zero-norm slices raise."""
    a = _wrap(a)
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise NumericsError("l2_normalize: zero-norm slice")
    return mul(a, power(sq, -0.5))


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity of two 1-D vectors, in [-1, 1]."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: expected matching vectors, got {a.shape} and {b.shape}")
    na = tsum(mul(a, a))
    nb = tsum(mul(b, b))
    if na.data <= 0.0 or nb.data <= 0.0:
        raise NumericsError("cosine_similarity: zero-norm vector")
    return mul(tsum(mul(a, b)), power(mul(na, nb), -0.5))


# -- verification ------------------------------------------------------------


def gradcheck(build, params, step: float = 1e-4) -> float:
    """Compare analytic gradients of ``build() -> scalar Tensor`` against
    central finite differences. Returns the worst relative error over all
    elements of ``params``."""
    out = build()
    if out.data.shape != ():
        raise UsageError("gradcheck: build() must return a scalar")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = build().item()
            flat[i] = orig - step
            lo = build().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        numeric = numeric.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1.0)
        worst = max(worst, float(np.max(np.abs(numeric - analytic) / denom)))
    return worst
