"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates gradients into the leaves.

Broadcasting is limited to what the model needs: leading batch dimensions
and size-1 axes, reduced again in the backward pass by :func:`unbroadcast`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

_GRAD_ENABLED = True

MASK_FILL = -1e30


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

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
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot align shapes {a.shape} and {b.shape}") from exc
    return _result(data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot align shapes {a.shape} and {b.shape}") from exc
    return _result(data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot align shapes {a.shape} and {b.shape}") from exc
    return _result(
        data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout. Returns ``x`` itself when ``p == 0`` or not training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0 or not train:
        return x
    if rng is None:
        raise ConfigError("dropout at train time needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is True by a constant; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _result(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    return _result(data, (x,), lambda g: (unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(data, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    data = x.data[idx]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(data, dtype=np.float64), (x,), backward)


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _result(y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def cross_entropy_from_logits(logits: Tensor, targets, axis: int = -1) -> Tensor:
    """Mean negative log-softmax of ``targets``; ``axis`` is the class axis of a 2-D logit matrix."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    rows = logits.data if axis in (-1, 1) else logits.data.T
    targets = np.asarray(targets, dtype=np.int64)
    n, c = rows.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but targets of shape {targets.shape}")
    if n == 0:
        raise ShapeError("cross_entropy over zero positions")
    shifted = rows - rows.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1.0
        d *= g / n
        return (d if axis in (-1, 1) else d.T,)

    return _result(np.asarray(loss), (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise ``x`` to zero mean / unit variance along ``axis``, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    axis = axis % x.ndim
    d = x.shape[axis]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: extent {d} on axis {axis} but gain {gain.shape}, bias {bias.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = d
    gb = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv_std
    y = xhat * gb + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx = gg = gbias = None
        if x.requires_grad:
            gxhat = g * gb
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=axis, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=other)
        if bias.requires_grad:
            gbias = g.sum(axis=other)
        return gx, gg, gbias

    return _result(y, (x, gain, bias), backward)
