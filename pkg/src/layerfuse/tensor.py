"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. :func:`backward` walks the tape in reverse topological
order, so accumulation order is fixed by the order of the forward pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_grad_enabled = True

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "_requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Parameter(Tensor):
    """A trainable leaf. Frozen parameters are invisible to the tape."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.frozen = False

    @property
    def requires_grad(self) -> bool:
        return not self.frozen

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        if frozen:
            self.grad = None

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out._requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers; call
    ``Module.zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), grad_fn)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    out = x ** exponent

    def grad_fn(g):
        return (g * exponent * x ** (exponent - 1.0),)

    return _record(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(x * cdf, (a,), grad_fn)


def elu(a: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)

    def grad_fn(g):
        return (g * np.where(x > 0, 1.0, neg_part + 1.0),)

    return _record(out, (a,), grad_fn)


def elu_plus_one(a: Tensor) -> Tensor:
    """``1 + elu(x)`` evaluated as ``exp(x)`` on the negative side, so it stays
    strictly positive until ``exp`` itself underflows."""
    x = a.data
    neg_part = np.exp(np.minimum(x, 0.0))
    out = np.where(x > 0, x + 1.0, neg_part)

    def grad_fn(g):
        return (g * np.where(x > 0, 1.0, neg_part),)

    return _record(out, (a,), grad_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# linear algebra and reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _record(ad @ bd, (a, b), grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate gradient."""
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), grad_fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    vocab, width = weight.shape

    def grad_fn(g):
        out = np.zeros((vocab, width))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, width))
        return (out,)

    return _record(weight.data[ids], (weight,), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tensors, grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(out, tensors, grad_fn)


# normalisation and probability ---------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match width {width}"
        )
    xd = x.data
    centered = xd - xd.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return _record(xhat * gd + bias.data, (x, gain, bias), grad_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored.

    ``logits`` is ``[..., C]``; ``targets`` holds integer class ids with the
    matching leading shape.
    """
    n_cls = logits.shape[-1]
    flat = logits.data.reshape(-1, n_cls)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    rows = np.flatnonzero(tgt != ignore_index)
    if rows.size == 0:
        raise ContractError("cross_entropy: every target is ignored")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[rows, tgt[rows]] - logz[rows]
    loss = -picked.mean()

    def grad_fn(g):
        probs = np.exp(shifted[rows] - logz[rows, None])
        probs[np.arange(rows.size), tgt[rows]] -= 1.0
        out = np.zeros_like(flat)
        out[rows] = probs * (float(g) / rows.size)
        return (out.reshape(logits.shape),)

    return _record(np.asarray(loss), (logits,), grad_fn)

