"""
Minimal dense-tensor engine with reverse-mode differentiation.

Every value is a float64 numpy array wrapped in a :class:`Tensor`. Operations
record their inputs and a backward closure when gradient recording is on and
at least one input requires a gradient. :func:`backward` walks the recorded
graph in reverse topological order and accumulates gradients into the
``grad`` buffers of leaf tensors.

Gradients accumulate across calls until :func:`zero_grad` (or
``Tensor.zero_grad``) clears them.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from tamcl.errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (teacher/eval forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------

def _binary(fn, a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(_binary(np.add, a.data, b.data, "add"), (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(_binary(np.subtract, a.data, b.data, "sub"), (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(_binary(np.multiply, ad, bd, "mul"), (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = _binary(np.divide, ad, bd, "div")

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= x
        d *= _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d += 1.0
        d += th
        d *= 0.5
        d *= g
        return (d,)

    return _record(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching/broadcast rules on leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise ShapeError(f"matmul: scalars not supported, got {ad.shape} and {bd.shape}")
    k_a = ad.shape[-1]
    k_b = bd.shape[-2] if bd.ndim >= 2 else bd.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        return _matmul_weight(a, b)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}") from None

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if ad.ndim == 1:
                ga = ga[..., 0, :]
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if bd.ndim == 1:
                gb = gb[..., :, 0]
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record(out, (a, b), backward, "matmul")


def _matmul_weight(a: Tensor, b: Tensor) -> Tensor:
    # [..., m, k] @ [k, n]: fold leading dims so both products are plain 2-D GEMMs
    ad, bd = a.data, b.data
    a2 = ad.reshape(-1, ad.shape[-1])
    out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _record(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def getitem(a, index) -> Tensor:
    """Basic and integer-array indexing; backward scatters with np.add.at."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in ts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in arrays]} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, backward, "concat")


# ---------------------------------------------------------------------------
# fused numeric primitives
# ---------------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    if a.shape[axis] < 1:
        raise ShapeError(f"softmax: empty axis in shape {a.shape}")
    y = _softmax_np(a.data, axis)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(y, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    out = _log_softmax_np(a.data, axis)

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        dgamma = np.sum(g * xhat, axis=lead) if gamma.requires_grad else None
        dbeta = np.sum(g, axis=lead) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over all leading positions.

    ``logits`` is ``[..., n_classes]``; ``labels`` is an int or int array
    matching the leading shape.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"cross_entropy: label out of range [0, {n_classes})")
    _check_finite(logits.data, "cross_entropy")
    logp = _log_softmax_np(logits.data, -1)
    flat = logp.reshape(-1, n_classes)
    idx = labels.reshape(-1)
    count = max(idx.size, 1)
    loss = -flat[np.arange(idx.size), idx].sum() / count

    def backward(g):
        d = np.exp(logp).reshape(-1, n_classes)
        d[np.arange(idx.size), idx] -= 1.0
        return ((g / count) * d.reshape(logits.shape),)

    return _record(np.asarray(loss), (logits,), backward, "cross_entropy")


def soft_cross_entropy(logits, target_probs) -> Tensor:
    """-sum(target * log_softmax(logits)) over the last axis, mean over the rest.

    ``target_probs`` is treated as a constant.
    """
    logits = as_tensor(logits)
    p = as_tensor(target_probs).data
    if p.shape != logits.shape:
        raise ShapeError(f"soft_cross_entropy: target {p.shape} vs logits {logits.shape}")
    logq = _log_softmax_np(logits.data, -1)
    count = max(logits.size // logits.shape[-1], 1)
    loss = -np.sum(p * logq) / count

    def backward(g):
        q = np.exp(logq)
        return ((g / count) * (q * p.sum(axis=-1, keepdims=True) - p),)

    return _record(np.asarray(loss), (logits,), backward, "soft_cross_entropy")


def kl_divergence(student, teacher, temperature: float = 1.0) -> Tensor:
    """KL(softmax(teacher/T) || softmax(student/T)), mean over leading positions.

    The teacher side is always a constant: it never joins the graph, so no
    gradient buffer is ever created for it.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    student = as_tensor(student)
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    if t.shape != student.shape:
        raise ShapeError(f"kl_divergence: student {student.shape} vs teacher {t.shape}")
    logp = _log_softmax_np(t / temperature, -1)
    p = np.exp(logp)
    logq = _log_softmax_np(student.data / temperature, -1)
    count = max(student.size // student.shape[-1], 1)
    loss = np.sum(p * (logp - logq)) / count

    def backward(g):
        return ((g / (count * temperature)) * (np.exp(logq) - p),)

    return _record(np.asarray(loss), (student,), backward, "kl_div")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, inputs before outputs."""
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
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> list[Tensor]:
    """Back-propagate from a scalar ``loss``; returns the leaves that received gradient.

    Leaf gradients are added to any existing ``grad`` buffer.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves = []
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.array(g, dtype=np.float64)  # own the buffer (broadcast views are read-only)
            node.grad = g if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
