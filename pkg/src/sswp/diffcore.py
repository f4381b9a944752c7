"""Small reverse-mode autodiff engine on top of numpy.

Every differentiable op is a forward function that records its parents and
whatever it needs for the backward pass, plus a backward rule registered in
``BACKWARD_RULES`` under the op's name.  Rules are looked up at backward time,
so a rule can be swapped out (the gradient-check negative control does this).

Training runs in float32; verification code switches the default dtype to
float64 with :func:`precision`.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericAbort", "BACKWARD_RULES",
    "tensor", "parameter", "precision", "no_grad", "get_default_dtype",
    "add", "sub", "mul", "scale", "matmul", "exp", "log", "tanh", "sigmoid",
    "swish", "softmax", "log_softmax", "layer_norm", "embedding", "concat",
    "slice_", "reshape", "transpose", "masked_fill", "sum_", "mean",
    "depthwise_conv1d", "l2_normalize_rows",
    "trace", "backward", "AdamState", "adam_step", "cosine_lr",
]


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not conform."""

    def __init__(self, op: str, msg: str):
        super().__init__(f"{op}: {msg}")
        self.op = op


class NumericAbort(FloatingPointError):
    """A NaN/inf showed up where training cannot continue."""


_state = {"dtype": np.float32, "grad": True}


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (np.float32 / np.float64)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx", "name")

    def __init__(self, data, requires_grad=False, op=None, parents=(), ctx=None, name=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.name = name

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

    def __repr__(self):
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is None and (arr.dtype.kind == "f" or arr.dtype.kind in "iub"):
        dtype = _state["dtype"]
    arr = np.array(arr, dtype=dtype, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return tensor(data, requires_grad=True, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op, out, parents, ctx=None) -> Tensor:
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out)
    return Tensor(out, requires_grad=True, op=op, parents=tuple(parents), ctx=ctx)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


BACKWARD_RULES: dict[str, Callable] = {}


def _rule(name):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b))


@_rule("mul")
def _mul_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * a.dtype.type(c), (a,), c)


@_rule("scale")
def _scale_bw(g, node):
    return (g * g.dtype.type(node.ctx),)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), out)


@_rule("exp")
def _exp_bw(g, node):
    return (g * node.ctx,)


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,))


@_rule("log")
def _log_bw(g, node):
    return (g / node.parents[0].data,)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), out)


@_rule("tanh")
def _tanh_bw(g, node):
    y = node.ctx
    return (g * (1 - y * y),)


def _sigmoid_np(x):
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make("sigmoid", out, (a,), out)


@_rule("sigmoid")
def _sigmoid_bw(g, node):
    y = node.ctx
    return (g * y * (1 - y),)


def swish(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if np.ndim(out) == 0:
        out = np.reshape(out, (1,))
        axis = None
    return _make("sum", np.asarray(out, dtype=a.dtype), (a,), (axis, keepdims))


@_rule("sum")
def _sum_bw(g, node):
    (a,) = node.parents
    axis, keepdims = node.ctx
    if axis is None:
        return (np.broadcast_to(g.reshape(()) if g.size == 1 else g, a.shape).copy(),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    return _make("matmul", out, (a, b))


@_rule("matmul")
def _matmul_bw(g, node):
    a, b = node.parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


# ---------------------------------------------------------------- normalisers

def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,), (out, axis))


@_rule("softmax")
def _softmax_bw(g, node):
    y, axis = node.ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make("log_softmax", out, (a,), (out, axis))


@_rule("log_softmax")
def _log_softmax_bw(g, node):
    y, axis = node.ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    return _make("layer_norm", out, (x, gamma, beta), (xhat, inv))


@_rule("layer_norm")
def _layer_norm_bw(g, node):
    x, gamma, _ = node.parents
    xhat, inv = node.ctx
    d = x.shape[-1]
    gxhat = g * gamma.data
    gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(-1, keepdims=True) + x.dtype.type(eps))
    y = x.data / n
    return _make("l2_normalize_rows", y, (x,), (y, n))


@_rule("l2_normalize_rows")
def _l2n_bw(g, node):
    y, n = node.ctx
    return ((g - y * (g * y).sum(-1, keepdims=True)) / n,)


# ---------------------------------------------------------------- indexing / shape

def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError("embedding", f"indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding", f"index out of range for table of {table.shape[0]} rows")
    return _make("embedding", table.data[idx], (table,), idx)


@_rule("embedding")
def _embedding_bw(g, node):
    (table,) = node.parents
    gt = np.zeros_like(table.data)
    np.add.at(gt, node.ctx, g)
    return (gt,)


def concat(xs: Sequence[Tensor], axis=-1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                i != ax and p != q for i, (p, q) in enumerate(zip(x.shape, ref))):
            raise ShapeError("concat", f"shapes {ref} and {x.shape} differ off axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make("concat", out, xs, (ax, sizes))


@_rule("concat")
def _concat_bw(g, node):
    ax, sizes = node.ctx
    return tuple(np.split(g, sizes, axis=ax))


def slice_(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if out.ndim == 0:
        out = out.reshape(1)
    return _make("slice", np.array(out), (x,), key)


@_rule("slice")
def _slice_bw(g, node):
    (x,) = node.parents
    gx = np.zeros_like(x.data)
    key = node.ctx
    view_shape = np.shape(gx[key])
    if _is_basic_index(key):
        gx[key] += g.reshape(view_shape)
    else:
        np.add.at(gx, key, g.reshape(view_shape))
    return (gx,)


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in keys)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {shape}") from None
    return _make("reshape", out, (x,))


@_rule("reshape")
def _reshape_bw(g, node):
    return (g.reshape(node.parents[0].shape),)


def transpose(x: Tensor, axes) -> Tensor:
    return _make("transpose", np.ascontiguousarray(np.transpose(x.data, axes)), (x,), tuple(axes))


@_rule("transpose")
def _transpose_bw(g, node):
    return (np.transpose(g, np.argsort(node.ctx)),)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError("masked_fill", f"mask {np.shape(mask)} does not fit {x.shape}") from None
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make("masked_fill", out, (x,), mask)


@_rule("masked_fill")
def _masked_fill_bw(g, node):
    return (np.where(node.ctx, 0, g).astype(g.dtype),)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded per-channel convolution. x: (B, T, C), w: (K, C) with K odd."""
    if x.ndim != 3:
        raise ShapeError("depthwise_conv1d", f"x must be (B, T, C), got {x.shape}")
    k, c = w.shape
    if c != x.shape[-1] or k % 2 == 0:
        raise ShapeError("depthwise_conv1d", f"kernel {w.shape} vs input channels {x.shape[-1]}")
    t = x.shape[1]
    half = k // 2
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    out = np.zeros_like(x.data)
    for i in range(k):
        out += xp[:, i:i + t, :] * w.data[i]
    parents = (x, w)
    if b is not None:
        out += b.data
        parents = (x, w, b)
    return _make("depthwise_conv1d", out, parents, xp)


@_rule("depthwise_conv1d")
def _dwconv_bw(g, node):
    x, w = node.parents[:2]
    xp = node.ctx
    k = w.shape[0]
    t = x.shape[1]
    half = k // 2
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w.data)
    for i in range(k):
        gxp[:, i:i + t, :] += g * w.data[i]
        gw[i] = (g * xp[:, i:i + t, :]).sum(axis=(0, 1))
    grads = (gxp[:, half:half + t, :], gw)
    if len(node.parents) == 3:
        grads += (g.sum(axis=(0, 1)),)
    return grads


# ---------------------------------------------------------------- backward

def trace(loss: Tensor) -> list[Tensor]:
    """Topological order of the graph feeding ``loss`` (inputs first)."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Backpropagate from a scalar ``loss``.

    Leaf tensors get their ``.grad`` overwritten.  If ``params`` is a mapping,
    returns ``{name: grad}`` with zeros for parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for node in reversed(trace(loss)):
        g = grads.pop(id(node), None)
        if node.op is None:
            node.grad = g if g is not None else np.zeros_like(node.data)
            leaf_grads[id(node)] = node.grad
            continue
        if g is None:
            continue
        pgrads = BACKWARD_RULES[node.op](g, node)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad:
                continue
            if pg.dtype != p.data.dtype:
                pg = pg.astype(p.data.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if params is None:
        return None
    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    out = {}
    for k, p in items:
        g = leaf_grads.get(id(p))
        out[k] = g if g is not None else np.zeros_like(p.data)
    return out


def zero_grads(params: Mapping[str, Tensor]):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float | Mapping[str, float]) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``lr`` may be a float or a per-parameter mapping.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericAbort(f"non-finite gradient for parameter {name!r} "
                               f"({bad} bad entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError("adam_step", f"grad for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        rate = lr[name] if isinstance(lr, Mapping) else lr
        if rate <= 0:
            continue
        upd = rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.data.dtype)
    return state


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min
    step = max(step, 0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * step / total_steps))
