"""Dense float64 tensors with tape-based reverse-mode autodiff.

Only the operations a small vision transformer needs are provided. Every op
records its parents and a closure mapping the output gradient to per-parent
gradients; :func:`backward` replays those closures in reverse topological
order, visiting each node exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True
_debug = False


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf when enabled (slow)."""
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_mode() -> Iterator[None]:
    prev = _debug
    set_debug(True)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    """An n-d float64 array that may participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0 or arr.flags.c_contiguous:
            self.data = arr
        else:
            self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators --------------------------------------------------------
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
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _debug and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw)


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation / activations -------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(
    x: Tensor,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = 1e-6,
) -> Tensor:
    """Normalise over the last axis; affine applied when weight/bias given."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, weight, bias) if t is not None)

    def bw(g):
        grads = []
        if x.requires_grad:
            gx = g * weight.data if weight is not None else g
            gx = rstd * (
                gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            grads.append(gx)
        else:
            grads.append(None)
        lead = tuple(range(g.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead) if weight.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=lead) if bias.requires_grad else None)
        return grads

    return _make(out, parents, bw)


# -- shape / indexing ------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic_key(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis), type(None))) for k in keys)


def getitem(x: Tensor, key) -> Tensor:
    basic = _is_basic_key(key)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(x.data[key]), (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis, independently per leading index.

    ``x`` has shape ``lead + (T, D)`` and ``idx`` has shape ``lead + (K,)``;
    the result is ``lead + (K, D)``. The backward pass scatter-adds.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != x.ndim - 1 or idx.shape[:-1] != x.shape[:-2]:
        raise DimensionError(f"gather_rows: index shape {idx.shape} incompatible with {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise DimensionError(f"gather_rows: index out of range for axis of length {x.shape[-2]}")
    axis = x.ndim - 2
    out = np.take_along_axis(x.data, idx[..., None], axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def expand(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape

    def bw(g):
        return (_unbroadcast(g, src),)

    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bw)


# -- reductions & losses ---------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def sq_error_rows(pred: Tensor, target: Tensor) -> Tensor:
    """Squared L2 distance between matching rows: sum over the last axis."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"row error shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data

    def bw(g):
        d = 2.0 * diff * g[..., None]
        return (d if pred.requires_grad else None, -d if target.requires_grad else None)

    return _make((diff * diff).sum(axis=-1), (pred, target), bw)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    rows = sq_error_rows(pred, target)
    return mul(tsum(rows), 1.0 / pred.size)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), bw)


# -- backward ----------------------------------------------------------------
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the gradient tape")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
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


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Compare autodiff gradients with central finite differences.

    Returns max over inputs of ||g_auto - g_fd||_inf / (||g_fd||_inf + 1e-12).
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(fn(*inputs))
    worst = 0.0
    with no_grad():
        for t in inputs:
            fd = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = fn(*inputs).item()
                flat[i] = orig - eps
                down = fn(*inputs).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            auto = t.grad if t.grad is not None else np.zeros_like(t.data)
            err = np.abs(auto - fd).max() / (np.abs(fd).max() + 1e-12)
            worst = max(worst, float(err))
    return worst
