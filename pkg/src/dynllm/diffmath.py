"""Minimal reverse-mode differentiation on numpy arrays.

Only the primitives the model needs are provided. Heavier building blocks
(affine maps, multi-head attention, the GRU cell, the time encoding) are
single fused tape nodes with hand-written backward passes, which keeps the
per-event tape short. Every primitive is covered by :func:`grad_check`.
"""

from __future__ import annotations

import contextlib
import math
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ParameterStore", "Adam",
    "DimensionError", "GradCheckError", "CheckpointError",
    "no_grad", "is_grad_enabled", "as_tensor", "backward",
    "add", "sub", "mul", "scale", "matmul", "affine", "batched_affine",
    "concat", "stack", "reshape", "take_rows", "select_along", "overlay_rows",
    "tanh", "sigmoid", "log_sigmoid", "softmax", "sum", "mean", "square",
    "dropout", "multi_head_attention", "gru_cell", "grad_check",
    "save_arrays", "load_arrays",
]

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class GradCheckError(ArithmeticError):
    """A gradient check hit a non-finite value."""


class CheckpointError(IOError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
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
    """An array plus, when recorded, the closure that routes its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf whose gradient buffer lives alongside it."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward_fn
                break
    return out


def _toposort(root: Tensor) -> list:
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


def backward(root: Tensor, grad=None) -> None:
    """Propagate ``grad`` (default ones) from ``root`` into every leaf's ``.grad``."""
    if not root.requires_grad:
        return
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    grads = {id(root): seed}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _node(ad * bd, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(sigmoid(a))``."""
    a = as_tensor(a)
    x = a.data
    y = -np.logaddexp(0.0, -x)
    return _node(y, (a,), lambda g: (g * _sigmoid(-x),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
    return _node(y, (a,), bw)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _node(ad @ bd, (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``y = x @ W + b`` over any number of leading dimensions of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    xd, Wd = x.data, W.data
    if Wd.ndim != 2 or xd.shape[-1] != Wd.shape[0] or b.data.shape != (Wd.shape[1],):
        raise DimensionError(
            f"affine: input {xd.shape} does not conform to weight {Wd.shape} / bias {b.data.shape}")

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ Wd.T) if x.requires_grad else None
        gW = (xd.reshape(-1, xd.shape[-1]).T @ g2) if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb
    return _node(xd @ Wd + b.data, (x, W, b), bw)


def batched_affine(x, W, b) -> Tensor:
    """Per-slot affine map: ``x`` (B, F, p), ``W`` (F, p, m), ``b`` (F, m) -> (B, F, m)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    xd, Wd = x.data, W.data
    if xd.ndim != 3 or Wd.ndim != 3 or xd.shape[1:] != Wd.shape[:2]:
        raise DimensionError(f"batched_affine: input {xd.shape} vs weight {Wd.shape}")
    xt = np.swapaxes(xd, 0, 1)  # (F, B, p)
    y = np.swapaxes(xt @ Wd, 0, 1) + b.data

    def bw(g):
        gt = np.swapaxes(g, 0, 1)  # (F, B, m)
        gx = np.swapaxes(gt @ np.swapaxes(Wd, 1, 2), 0, 1) if x.requires_grad else None
        gW = (np.swapaxes(xt, 1, 2) @ gt) if W.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb
    return _node(y, (x, W, b), bw)


# -- structural -----------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return _node(np.stack([t.data for t in ts], axis=axis), ts, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def take_rows(a, index) -> Tensor:
    """Gather ``a[index]`` along axis 0; ``index`` may have any shape."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.data.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx.ravel(), g.reshape((idx.size,) + shape[1:]))
        return (out,)
    return _node(a.data[idx], (a,), bw)


def select_along(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis``; indices must be unique along ``axis``."""
    a = as_tensor(a)
    shape = a.data.shape

    def bw(g):
        out = np.zeros(shape)
        np.put_along_axis(out, index, g, axis=axis)
        return (out,)
    return _node(np.take_along_axis(a.data, index, axis=axis), (a,), bw)


def overlay_rows(base: np.ndarray, groups: Sequence[tuple]) -> Tensor:
    """Constant ``base`` with rows taken from tensors still on the tape.

    Each group is ``(positions, source, source_rows)`` and sets
    ``out[positions] = source[source_rows]``; positions must not repeat
    across groups.
    """
    out = np.array(base, dtype=np.float64)
    groups = [(np.asarray(p, dtype=np.intp), as_tensor(s), np.asarray(r, dtype=np.intp))
              for p, s, r in groups]
    for p, s, r in groups:
        out[p] = s.data[r]

    def bw(g):
        grads = []
        for p, s, r in groups:
            gs = np.zeros(s.data.shape)
            np.add.at(gs, r, g[p])
            grads.append(gs)
        return tuple(grads)
    return _node(out, tuple(s for _, s, _ in groups), bw)


# -- fused model primitives -----------------------------------------------

def multi_head_attention(query, keys, values, params: Sequence, heads: int, mask=None):
    """Scaled dot-product attention with learned q/k/v/output projections.

    ``query`` is (B, d_q), ``keys``/``values`` are (B, n, d_k). ``params`` is
    ``(Wq, bq, Wk, bk, Wv, bv, Wo, bo)`` with ``Wq: d_q x d_a``,
    ``Wk, Wv: d_k x d_a`` and ``Wo: d_a x d_out``; ``d_a`` is split into
    ``heads`` equal slices scaled by ``1/sqrt(d_a/heads)``. Rows whose mask is
    all False produce a zero output. Returns ``(output, weights)`` where
    ``weights`` is a (B, heads, n) array.
    """
    q_in, k_in, v_in = as_tensor(query), as_tensor(keys), as_tensor(values)
    Wq, bq, Wk, bk, Wv, bv, Wo, bo = (as_tensor(p) for p in params)
    Q, K, V = q_in.data, k_in.data, v_in.data
    if Q.ndim == 1:
        raise DimensionError(f"attention query must be 2-D, got {Q.shape}")
    B, n = K.shape[0], K.shape[1]
    da = Wq.data.shape[1]
    if da % heads:
        raise DimensionError(f"attention width {da} not divisible by {heads} heads")
    if Q.shape[0] != B or V.shape[:2] != (B, n) or Q.shape[1] != Wq.data.shape[0] \
            or K.shape[2] != Wk.data.shape[0] or V.shape[2] != Wv.data.shape[0]:
        raise DimensionError(
            f"attention: query {Q.shape}, keys {K.shape}, values {V.shape} do not "
            f"conform to projections {Wq.data.shape}, {Wk.data.shape}, {Wv.data.shape}")
    if n == 0:
        raise DimensionError("attention over zero tokens; use the zero-history fallback")
    dh = da // heads
    sc = 1.0 / math.sqrt(dh)
    if mask is None:
        mask = np.ones((B, n), dtype=bool)
    has_any = mask.any(axis=1).astype(np.float64)[:, None]

    q = (Q @ Wq.data + bq.data).reshape(B, heads, 1, dh)
    k = (K @ Wk.data + bk.data).reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    v = (V @ Wv.data + bv.data).reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    logits = (q @ k.transpose(0, 1, 3, 2))[:, :, 0, :] * sc          # (B, H, n)
    logits = np.where(mask[:, None, :], logits, -np.inf)
    mx = logits.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(logits - mx)
    tot = e.sum(axis=-1, keepdims=True)
    a = e / np.where(tot > 0, tot, 1.0)
    ctx = (a[:, :, None, :] @ v)[:, :, 0, :].reshape(B, da)           # (B, d_a)
    out = (ctx @ Wo.data + bo.data) * has_any

    def bw(g):
        g = g * has_any
        gWo = ctx.T @ g
        gbo = g.sum(axis=0)
        gctx = (g @ Wo.data.T).reshape(B, heads, 1, dh)
        ga = (gctx @ v.transpose(0, 1, 3, 2))[:, :, 0, :]            # (B, H, n)
        gv = a[:, :, :, None] * gctx                                   # (B, H, n, dh)
        glog = a * (ga - np.sum(ga * a, axis=-1, keepdims=True)) * sc
        gq = (glog[:, :, None, :] @ k)[:, :, 0, :].reshape(B, da)
        gk = glog[:, :, :, None] * q                                   # (B, H, n, dh)
        gk = gk.transpose(0, 2, 1, 3).reshape(B, n, da)
        gv = gv.transpose(0, 2, 1, 3).reshape(B, n, da)
        gk2, gv2 = gk.reshape(B * n, da), gv.reshape(B * n, da)
        return (
            gq @ Wq.data.T if q_in.requires_grad else None,
            gk @ Wk.data.T if k_in.requires_grad else None,
            gv @ Wv.data.T if v_in.requires_grad else None,
            Q.T @ gq, gq.sum(axis=0),
            K.reshape(B * n, -1).T @ gk2, gk2.sum(axis=0),
            V.reshape(B * n, -1).T @ gv2, gv2.sum(axis=0),
            gWo, gbo,
        )
    node = _node(out, (q_in, k_in, v_in, Wq, bq, Wk, bk, Wv, bv, Wo, bo), bw)
    return node, a


def gru_cell(hidden, inputs, params: Sequence) -> Tensor:
    """One GRU step, ``params = (Wz, Wr, Wn, Uz, Ur, Un, bz, br, bn)``.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    n = tanh(x Wn + (r * h) Un + bn), h' = (1 - z) * n + z * h.
    """
    h_t, x_t = as_tensor(hidden), as_tensor(inputs)
    ps = tuple(as_tensor(p) for p in params)
    Wz, Wr, Wn, Uz, Ur, Un, bz, br, bn = (p.data for p in ps)
    h, x = h_t.data, x_t.data
    if h.ndim != 2 or x.ndim != 2 or h.shape[0] != x.shape[0] \
            or x.shape[1] != Wz.shape[0] or h.shape[1] != Uz.shape[0]:
        raise DimensionError(
            f"gru_cell: hidden {h.shape} / input {x.shape} vs weights {Wz.shape}, {Uz.shape}")
    z = _sigmoid(x @ Wz + h @ Uz + bz)
    r = _sigmoid(x @ Wr + h @ Ur + br)
    rh = r * h
    nn = np.tanh(x @ Wn + rh @ Un + bn)
    out = (1.0 - z) * nn + z * h

    def bw(g):
        gz = g * (h - nn)
        gh = g * z
        gan = g * (1.0 - z) * (1.0 - nn * nn)
        grh = gan @ Un.T
        gar = grh * h * r * (1.0 - r)
        gh = gh + grh * r + gar @ Ur.T
        gaz = gz * z * (1.0 - z)
        gh = gh + gaz @ Uz.T
        gx = gan @ Wn.T + gar @ Wr.T + gaz @ Wz.T
        return (gh, gx,
                x.T @ gaz, x.T @ gar, x.T @ gan,
                h.T @ gaz, h.T @ gar, rh.T @ gan,
                gaz.sum(axis=0), gar.sum(axis=0), gan.sum(axis=0))
    return _node(out, (h_t, x_t) + ps, bw)


# -- parameters -----------------------------------------------------------

class ParameterStore:
    """Ordered, uniquely named collection of :class:`Parameter` objects."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def uniform(self, name: str, shape: tuple, fan_in: int | None = None) -> Parameter:
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` (fan_in defaults to shape[-2])."""
        if fan_in is None:
            fan_in = shape[-2] if len(shape) >= 2 else shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def squared_norm(self) -> Tensor:
        """``sum_p ||p||^2`` as a differentiable scalar."""
        ps = list(self._params.values())
        total = float(np.sum([np.vdot(p.data, p.data) for p in ps]))

        def bw(g):
            return tuple(2.0 * g * p.data for p in ps)
        return _node(np.asarray(total), tuple(ps), bw)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self._params.items())

    def load_state(self, arrays: dict, strict: bool = True) -> None:
        for name, p in self._params.items():
            if name not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != {p.data.shape}")
            p.data[...] = value


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(self, params: ParameterStore, lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            m, v, g = self.m[p.name], self.v[p.name], p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- verification ---------------------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Iterable, eps: float = 1e-5,
               analytic: dict | None = None, per_tensor: bool = False) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` recomputes a scalar from the current values of ``inputs`` (Tensors
    with ``requires_grad``). ``analytic`` optionally maps ``id(tensor)`` to a
    gradient to compare instead of the reverse-mode one (used to test the
    checker itself). Element-wise relative error uses ``max(|a|, |n|, 1e-8)``
    as denominator; with ``per_tensor`` the error of each input is
    ``||a - n|| / max(||a||, ||n||, 1e-8)`` instead, which is not dominated by
    finite-difference noise on near-zero entries.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
    out = f()
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar output, got {out.data.shape}")
    backward(out)
    worst = 0.0
    for pos, t in enumerate(inputs):
        label = getattr(t, "name", f"input[{pos}]")
        if analytic is not None and id(t) in analytic:
            ga = np.asarray(analytic[id(t)], dtype=np.float64)
        else:
            ga = np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        numeric = np.zeros(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            if not (math.isfinite(num) and math.isfinite(gflat[j])):
                raise GradCheckError(f"non-finite gradient for {label} at flat index {j}")
            numeric[j] = num
        if per_tensor:
            scale = max(np.linalg.norm(gflat), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, float(np.linalg.norm(gflat - numeric)) / scale)
        else:
            denom = np.maximum(np.maximum(np.abs(gflat), np.abs(numeric)), 1e-8)
            worst = max(worst, float(np.max(np.abs(gflat - numeric) / denom, initial=0.0)))
    return worst


# -- checkpoint container -------------------------------------------------

MAGIC = b"DYNLLM01"


def save_arrays(path, arrays: dict) -> None:
    """Write named float64 arrays into the single-file checkpoint container."""
    chunks = [MAGIC]
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    out, pos = OrderedDict(), 8
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated container") from exc
    return out
