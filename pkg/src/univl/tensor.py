"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every model component is written in terms of the functions below. Each op
records its parents and a closure mapping the output gradient to one gradient
per parent; :meth:`Tensor.backward` walks the graph in reverse topological
order and accumulates.

Broadcasting is deliberately narrow: elementwise ops require equal shapes,
except that a right operand whose shape equals the trailing dimensions of the
left operand is treated as a bias and its gradient is summed over the leading
axes.

The GELU used throughout is the exact normal-CDF form ``x * Phi(x)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
GELU_VARIANT = "exact-erf"


class ShapeError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.require(np.asarray(data, dtype=DTYPE), requirements="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=DTYPE), like.shape))


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (evaluation paths)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise / structural


def _reduce_bias(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_bias(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal or bias-compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_bias(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_bias(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_bias(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, _reduce_bias(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the sequence axis for ``[T; V]``)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def total(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    ax = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), backward)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    values = list(values)
    return concat([reshape(v, (1,)) for v in values], axis=0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., p, q]`` and ``b[q, r]`` or ``b[..., q, r]`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ for {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            q, r = b.shape
            gb = a.data.reshape(-1, q).T @ g.reshape(-1, r)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def _masked_fill(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax with max-subtraction; positions where ``mask`` is False get exactly zero weight."""
    z = _masked_fill(x.data, mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """log(sum(exp(x))) along ``axis`` restricted to entries where ``mask`` is True."""
    z = _masked_fill(x.data, mask)
    if mask is not None and not np.all(np.any(np.broadcast_to(mask, z.shape), axis=axis)):
        raise EmptyLossError("logsumexp over an empty selection")
    peak = z.max(axis=axis, keepdims=True)
    e = np.exp(z - peak)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + peak).squeeze(axis)
    w = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity unless ``train`` and ``rate > 0``."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# lookups, pooling, losses


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise IndexError(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def mean_pool(x: Tensor, keep: np.ndarray) -> Tensor:
    """Mean over the sequence axis (-2) using only rows where ``keep`` is True."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise ShapeError(f"mean_pool: mask shape {keep.shape} does not match {x.shape[:-1]}")
    counts = keep.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("mean_pool: a sequence has no non-padded rows")
    w = (keep / counts)[..., None]
    out = (x.data * w).sum(axis=-2)

    def backward(g):
        return (np.expand_dims(g, -2) * w,)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    rows = np.nonzero(targets != ignore_index)[0]
    if rows.size == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    cols = targets[rows]
    if cols.min() < 0 or cols.max() >= logits.shape[1]:
        raise IndexError(f"cross_entropy: target outside [0, {logits.shape[1]})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), cols]
    n = rows.size

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), cols] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (g / n)
        return (full,)

    return _make(np.array(nll.mean()), (logits,), backward)


# ---------------------------------------------------------------------------
# verification helpers


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Normwise relative error ``max|a-n| / max(max|a|, max|n|)``.

    When both gradients are below ``floor`` in magnitude the absolute error is
    returned instead, so exactly-zero gradients do not divide by zero.
    """
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    diff = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale_ = max(float(np.max(np.abs(a))) if a.size else 0.0, float(np.max(np.abs(n))) if n.size else 0.0)
    if scale_ < floor:
        return diff
    return diff / scale_


def numeric_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, coords: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` at ``coords`` (flat indices)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else list(coords)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn().data)
        flat[i] = old - h
        fm = float(fn().data)
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max normwise relative error between backprop and central differences over ``inputs``."""
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).copy()
        worst = max(worst, max_relative_error(analytic, numeric_gradient(fn, t, h)))
    return worst
