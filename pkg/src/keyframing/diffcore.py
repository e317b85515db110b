"""Minimal reverse-mode automatic differentiation over numpy arrays, plus Adam.

Every op builds a node holding its forward value and a vector-Jacobian
closure.  ``backward`` walks the graph once in reverse topological order.
Broadcasting is limited to a shared trailing shape (leading batch axes) or a
0-d operand; anything else is a ``ShapeError``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True
CHECK_FINITE = True


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class no_grad:
    """Context manager disabling graph construction (rollouts, evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "id", "name", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.vjp = None
        self.op = "leaf"
        self.id = next(_node_ids)
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _make(data, parents, vjp, op) -> Tensor:
    node_id = next(_node_ids)
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op '{op}' (node {node_id})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.id = node_id
    out.name = None
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.parents = parents if needs else ()
    out.vjp = vjp if needs else None
    return out


def _broadcast_shape(a, b, op):
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform (only leading-batch broadcasting)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg = np.expm1(np.minimum(xd, 0))
    # neg is 0 on the positive side, so the derivative is neg + 1 everywhere
    out = np.maximum(xd, 0) + neg
    return _make(out, (x,), lambda g: (g * (neg + 1),), "elu")


def elu_grad(x: Tensor) -> Tensor:
    """Derivative of ELU as a differentiable op (used for input-gradient graphs)."""
    xd = x.data
    e = np.exp(np.minimum(xd, 0))
    out = np.where(xd > 0, 1, e).astype(xd.dtype)
    return _make(out, (x,), lambda g: (g * np.where(xd > 0, 0, e).astype(xd.dtype),), "elu_grad")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data
    return _make(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (np.where(pick_a, g, 0), np.where(pick_a, 0, g)), "minimum")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (np.where(inside, g, 0),), "clip")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; those entries get no gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError as exc:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs input {x.shape}") from exc
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g),), "masked_fill")


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / n)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the lowest index among ties."""
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), vjp, "max_over_axis")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), vjp, "layer_norm")


# ------------------------------------------------------------------ structural

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError(f"matmul: left operand has fewer dims, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), vjp, "matmul")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    nd = xs[0].ndim
    axis = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def slice_(x: Tensor, index) -> Tensor:
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g) if _is_fancy(index) else gx.__setitem__(index, g)
        return (gx,)

    return _make(x.data[index], (x,), vjp, "slice")


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


# -------------------------------------------------------------------- backward

def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict:
    """Reverse pass from a scalar ``loss``.

    Returns a dict mapping each leaf tensor (or each of ``params`` when given)
    to its gradient array.  Leaves off every path to ``loss`` get zeros.  The
    gradient is also stored on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.vjp is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    if params is None:
        out = leaves
    else:
        out = {p: leaves.get(p, np.zeros_like(p.data)) for p in params}
    for p, g in out.items():
        p.grad = g
    return out


def grad(loss: Tensor, params) -> list:
    """Gradients of ``loss`` w.r.t. ``params`` as a list aligned with ``params``."""
    g = backward(loss, params)
    return [g[p] for p in params]


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, state)``; the state is updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: parameter, gradient and moment counts differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"adam_step: shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new.append((p - update).astype(p.dtype, copy=False))
    return new, state


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm is None or total <= max_norm:
        return grads, total
    k = max_norm / (total + 1e-6)
    return [g * g.dtype.type(k) for g in grads], total


@dataclass
class Adam:
    """Adam bound to a list of parameter tensors (updates ``.data`` in place)."""

    params: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.fresh(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def step(self, grads):
        grads, norm = clip_grad_norm(list(grads), self.max_grad_norm)
        self.state.lr = self.lr
        new, _ = adam_step([p.data for p in self.params], grads, self.state)
        for p, a in zip(self.params, new):
            p.data = a
        return norm
