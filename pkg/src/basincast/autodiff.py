"""Dense float64 arrays with reverse-mode differentiation.

The tape is implicit: every tensor produced by an operation keeps
references to its parent tensors, a backward rule, and a globally
increasing creation index. Creation order is a topological order of the
compute graph, so ``backward`` walks the reachable nodes by descending
index and visits each exactly once. Tensors created while no input
requires a gradient record nothing, which keeps inference cheap.

Workers never share a tape: each training process builds its own graph
per batch, and parameter values are plain arrays mutated only by the
optimizer between batches.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError

_COUNTER = itertools.count()


class Tensor:
    """A dense float64 array, optionally attached to the gradient tape."""

    __slots__ = ("values", "requires_grad", "_parents", "_backward", "_order")

    def __init__(self, values, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._order = next(_COUNTER)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(values) -> Tensor:
    """Constant tensor (not differentiated)."""
    return Tensor(values)


def parameter(values) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(values, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor],
          backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if req:
        return Tensor(values, True, tuple(parents), backward)
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.values, b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape),
                            _unbroadcast(g * av, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.values @ b.values
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def backward(g):
        ga = g @ bv.swapaxes(-1, -2)
        gb = av.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    denom = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / denom,)

    return _make(np.asarray(out), (x,), backward)


def slice_(x, key) -> Tensor:
    """Basic indexing (ints/slices). Use `take` for index arrays."""
    x = as_tensor(x)
    out = x.values[key]

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[key] = g
        return (gx,)

    return _make(out, (x,), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along `axis` with an integer index array."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.values, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make(out, (x,), backward)


def set_rows(base, values, indices, axis: int = 0) -> Tensor:
    """Copy of `base` with slices at `indices` (unique) replaced by `values`."""
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(indices, dtype=np.intp)
    out = base.values.copy()
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(values.values, axis, 0)

    def backward(g):
        gb = g.copy()
        np.moveaxis(gb, axis, 0)[idx] = 0.0
        gv = np.moveaxis(np.moveaxis(g, axis, 0)[idx], 0, axis)
        return gb, gv

    return _make(out, (base, values), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts])
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = x.values.transpose(axes)
    inv = np.argsort(axes)
    return _make(out, (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.values, shape)
    return _make(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # exp may overflow for very negative inputs; the limit 1/inf = 0 is exact
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.values))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.values > 0
    return _make(x.values * pos, (x,), lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.values > 0, 1.0, slope)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def softmax_with_mask(logits, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over `axis` with an additive mask (0 keep, -inf drop).

    Fully masked slices produce zeros with zero gradient; masked
    positions never receive probability mass or gradient.
    """
    x = as_tensor(logits)
    z = x.values + mask
    m = np.max(z, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - safe_m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), backward)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.values - mu) * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), backward)


def conv1d(x, w, padding: int = 0) -> Tensor:
    """1-D convolution (cross-correlation): x [..., C_in, L], w [C_out, C_in, K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 2 or w.ndim != 3 or x.shape[-2] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    c_out, c_in, k = w.shape
    length = x.shape[-1]
    l_out = length + 2 * padding - k + 1
    if l_out <= 0:
        raise ShapeError("conv1d", x.shape, w.shape)
    pad_spec = [(0, 0)] * (x.ndim - 1) + [(padding, padding)]
    xp = np.pad(x.values, pad_spec) if padding else x.values
    out = np.zeros(x.shape[:-2] + (c_out, l_out))
    for j in range(k):
        # [..., C_in, l_out] x [C_out, C_in] summed over C_in
        out += np.einsum("...cl,oc->...ol", xp[..., j:j + l_out], w.values[:, :, j])

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.values)
        gb = g.reshape(-1, c_out, l_out)
        for j in range(k):
            seg = xp[..., j:j + l_out]
            gw[:, :, j] = np.einsum("bol,bcl->oc", gb, seg.reshape(-1, c_in, l_out))
            gxp[..., j:j + l_out] += np.einsum("...ol,oc->...cl", g, w.values[:, :, j])
        gx = gxp[..., padding:padding + length] if padding else gxp
        return gx, gw

    return _make(out, (x, w), backward)


def dropout(x, rate: float, rng: np.random.Generator | None = None,
            training: bool = False) -> Tensor:
    """Inverted dropout; the identity when not training or rate == 0."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InvalidInputError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.values * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Gradients of a scalar `loss` for every reachable leaf.

    Returns a map Tensor -> ndarray. When `params` is given, every listed
    leaf appears in the map, with zeros if the loss does not reach it.
    """
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss._order: np.ones_like(loss.values)}
    nodes: dict[int, Tensor] = {loss._order: loss}
    # collect the reachable differentiable subgraph
    stack = [loss]
    seen = {loss._order}
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._order not in seen:
                seen.add(p._order)
                nodes[p._order] = p
                stack.append(p)

    leaf_grads: dict[Tensor, np.ndarray] = {}
    for order in sorted(nodes, reverse=True):
        node = nodes[order]
        g = grads.pop(order, None)
        if g is None:
            continue
        if node._backward is None:
            leaf_grads[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError("backward", pg.shape, p.shape)
            acc = grads.get(p._order)
            grads[p._order] = pg if acc is None else acc + pg

    if params is not None:
        for p in params:
            leaf_grads.setdefault(p, np.zeros_like(p.values))
    return leaf_grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_step(params: dict, grads: dict, moments: dict, t: int,
               lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    """One AdamW update, in place.

    Weight decay is decoupled: parameters shrink by lr*wd before the
    bias-corrected adaptive step. `moments` maps name -> (m, v) arrays and
    is created lazily; `t` is the 1-based step count.
    """
    if t < 1:
        raise InvalidInputError("adamw_step expects a 1-based step count")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in moments:
            moments[name] = (np.zeros_like(p.values), np.zeros_like(p.values))
        m, v = moments[name]
        if weight_decay:
            p.values *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Stateful wrapper around `adamw_step` holding moments and step count."""

    def __init__(self, params: dict, lr: float = 0.01, weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.moments: dict = {}

    def step(self, grads: dict) -> None:
        self.t += 1
        adamw_step(self.params, grads, self.moments, self.t, self.lr,
                   self.weight_decay, self.beta1, self.beta2, self.eps)
