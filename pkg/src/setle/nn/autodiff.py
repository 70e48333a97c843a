"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order. Values are float64 throughout.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None or node.grad.shape != g.shape:
                        node.grad = np.array(g, dtype=np.float64)
                    else:
                        node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(parents: Sequence[Tensor]) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _tracked(parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 and a.data.ndim != 1 or b.data.ndim not in (1, 2):
        raise ValueError(f"matmul expects 1-D/2-D operands, got {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _make(out, (a, b), backward)


def sparse_matmul(a_const, b) -> Tensor:
    """Constant sparse (scipy) or dense matrix times a tensor; only ``b`` gets a gradient."""
    b = as_tensor(b)
    out = np.asarray(a_const @ b.data)
    return _make(out, (b,), lambda g: (np.asarray(a_const.T @ g),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def _scatter_rows(g: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``g`` into an (n_rows, ...) array at positions ``rows``."""
    flat = g.reshape(len(rows), -1)
    sel = sparse.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n_rows, len(rows)))
    return np.asarray(sel @ flat).reshape((n_rows,) + g.shape[1:])


def take_rows(table, rows) -> Tensor:
    """Gather rows of a table; the gradient is scattered back with add."""
    table = as_tensor(table)
    rows = np.asarray(rows, dtype=np.int64)
    return _make(table.data[rows], (table,), lambda g: (_scatter_rows(g, rows, table.data.shape[0]),))


def segment_bilinear(e, r, seg) -> Tensor:
    """out[n, h] = sum_i e[n, i] * r[seg[n], i, h]   (e: N x d, r: B x d x H)."""
    e, r = as_tensor(e), as_tensor(r)
    seg = np.asarray(seg, dtype=np.int64)
    rs = r.data[seg]
    out = np.einsum("ni,nih->nh", e.data, rs)

    def backward(g):
        de = np.einsum("nh,nih->ni", g, rs)
        dr = _scatter_rows(e.data[:, :, None] * g[:, None, :], seg, r.data.shape[0])
        return de, dr

    return _make(out, (e, r), backward)


def segment_weighted_sum(w, e, seg, n_segments: int) -> Tensor:
    """out[b, h, :] = sum_{n: seg[n] = b} w[n, h] * e[n, :]   (w: N x H, e: N x d)."""
    w, e = as_tensor(w), as_tensor(e)
    seg = np.asarray(seg, dtype=np.int64)
    out = _scatter_rows(w.data[:, :, None] * e.data[:, None, :], seg, n_segments)

    def backward(g):
        gs = g[seg]
        return np.einsum("nhd,nd->nh", gs, e.data), np.einsum("nhd,nh->nd", gs, w.data)

    return _make(out, (w, e), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, neg_part + alpha),))


def hinge(a) -> Tensor:
    """max(0, a) with subgradient 0 at the kink."""
    return relu(a)


def huber(a, delta: float = 1.0) -> Tensor:
    a = as_tensor(a)
    small = np.abs(a.data) <= delta
    out = np.where(small, 0.5 * a.data ** 2, delta * (np.abs(a.data) - 0.5 * delta))
    return _make(out, (a,), lambda g: (g * np.where(small, a.data, delta * np.sign(a.data)),))


def identity(a) -> Tensor:
    return as_tensor(a)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.data.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    a = as_tensor(a)
    axis = -1
    norm = sqrt(tsum(a * a, axis=axis, keepdims=True) + eps)
    return a / norm


def dot(a, b) -> Tensor:
    return tsum(mul(a, b))


def cosine(a, b, eps: float = 1e-12) -> Tensor:
    return dot(l2_normalize(a, eps), l2_normalize(b, eps))


def euclidean(a, b, eps: float = 1e-12) -> Tensor:
    """sqrt(|a-b|^2 + eps); eps keeps the gradient finite for identical inputs."""
    d = sub(a, b)
    return sqrt(dot(d, d) + eps)


def parameters_of(objs: Iterable) -> list[Tensor]:
    return [p for p in objs if isinstance(p, Tensor) and p.requires_grad]
