"""Dense tensors with tape-free reverse-mode differentiation.

Every op produces a new :class:`Tensor`; when any input requires gradients the
output keeps references to its parents and a closure mapping the output
gradient to input gradients. :func:`backward` walks that graph once in reverse
topological order.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "NonFiniteError",
    "GraphConsumedError",
    "no_grad",
    "enable_grad",
    "grad_enabled",
    "activation_meter",
    "backward",
    "grad",
    "tensor",
    "add",
    "mul",
    "matmul",
    "softplus",
    "gelu",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "concat",
    "split",
    "masked_fill",
    "gather_rows",
    "scatter_rows",
    "conv",
    "smooth_l1",
    "elementwise",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class GraphConsumedError(RuntimeError):
    """Backward was requested through a graph that was already differentiated."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad():
    prev = grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class _Meter:
    """Counts bytes of activations retained by recorded graph nodes."""

    def __init__(self):
        self.nbytes = 0
        self.active = False


def _meter() -> _Meter:
    m = getattr(_state, "meter", None)
    if m is None:
        m = _state.meter = _Meter()
    return m


@contextmanager
def activation_meter():
    """Context yielding a meter whose ``nbytes`` tallies recorded activations."""
    m = _meter()
    prev_active, prev_bytes = m.active, m.nbytes
    m.active, m.nbytes = True, 0
    try:
        yield m
    finally:
        m.active = prev_active
        if prev_active:
            m.nbytes += prev_bytes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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
        return transpose(self, None)


def tensor(data, requires_grad=False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(data: np.ndarray, op: str, allow_neg_inf: bool = False):
    if np.isfinite(data).all():
        return
    if allow_neg_inf and not (np.isnan(data).any() or np.isposinf(data).any()):
        return
    raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str,
          allow_neg_inf: bool = False) -> Tensor:
    if data.dtype == np.float64 and parents and all(p.dtype == np.float32 for p in parents):
        data = data.astype(np.float32)  # keep 32-bit graphs 32-bit under scalar promotion
    _check_finite(data, op, allow_neg_inf)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        m = _meter()
        if m.active:
            m.nbytes += data.nbytes
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a} vs {b}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad ** p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """``ln(1 + e^x)`` via ``logaddexp``; saturates to ``x`` without overflow."""
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * expit(ad),), "softplus")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = ad * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _make(out, (a,), bw, "gelu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_UNARY = {"softplus": softplus, "gelu": gelu, "sigmoid": sigmoid, "relu": relu, "exp": exp,
          "log": log, "tanh": tanh, "neg": neg}
_BINARY = {"add": add, "mul": mul, "sub": lambda a, b: a - b, "div": lambda a, b: a / b}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``softplus``, ``gelu``, ...)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](_wrap(a), b)
    if kind in _UNARY:
        return _UNARY[kind](_wrap(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (``-inf`` allowed)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data).astype(a.dtype, copy=False)
    keep = ~mask
    return _make(out, (a,), lambda g: (g * keep,), "masked_fill", allow_neg_inf=True)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / max(n, 1))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """``a[rows]`` along axis 0; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.int64)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), bw, "gather_rows")


def scatter_rows(values: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Place ``values`` at distinct ``rows`` of an ``n``-row zero tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    out[rows] = values.data
    return _make(out, (values,), lambda g: (g[rows],), "scatter_rows")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: size mismatch {ref} vs {p.shape} on axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ValueError(f"split: sizes {list(sizes)} do not sum to {a.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + s)
        out.append(_slice(a, tuple(idx)))
        start += s
    return out


def _slice(a: Tensor, idx: tuple) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _make(a.data[idx].copy(), (a,), bw, "slice")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax. ``-inf`` entries get weight 0; an all ``-inf`` slice raises."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NonFiniteError("softmax: slice with no finite entry")
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd, n = gain.data, xd.shape[-1]
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 1) -> Tensor:
    """Channels-last N-d convolution (N = 2 or 3) as a single im2col matmul.

    ``x``: spatial dims + ``C_in``; ``w``: ``k^N * C_in`` rows by ``C_out``, with
    kernel offsets in row-major order and ``C_in`` fastest.
    """
    xd = x.data
    nd = xd.ndim - 1
    cin = xd.shape[-1]
    k = round((w.shape[0] // cin) ** (1.0 / nd))
    if k ** nd * cin != w.shape[0]:
        raise ValueError(f"conv: weight rows {w.shape[0]} do not match k^{nd}*{cin}")
    spatial = xd.shape[:-1]
    out_sp = tuple((s + 2 * padding - k) // stride + 1 for s in spatial)
    if any(o < 1 for o in out_sp):
        raise ValueError(f"conv: input {spatial} too small")
    pad = [(padding, padding)] * nd + [(0, 0)]
    xp = np.pad(xd, pad)
    offsets = list(np.ndindex(*([k] * nd)))

    def window(off):
        return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp))

    cols = np.concatenate([xp[window(off)] for off in offsets], axis=-1)
    cols2 = cols.reshape(-1, cols.shape[-1])
    out = cols2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(out_sp + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)
    wd = w.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = cols2.T @ g2
        gcols = (g2 @ wd.T).reshape(out_sp + (len(offsets) * cin,))
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i, off in enumerate(offsets):
            gxp[window(off)] += gcols[..., i * cin:(i + 1) * cin]
        gx = gxp[tuple(slice(padding, padding + s) for s in spatial)]
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _make(out, parents, bw, "conv")


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss against a constant target."""
    d = pred.data - target
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    return _make(out, (pred,), lambda g: (g * np.where(small, d / beta, np.sign(d)),), "smooth_l1")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run(root: Tensor, seed) -> dict[int, tuple[Tensor, np.ndarray]]:
    if not root.requires_grad:
        raise ValueError("output does not require grad")
    if seed is None:
        if root.data.size != 1:
            raise ValueError("seed required for non-scalar output")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=root.dtype)
    if seed.shape != root.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {root.shape}")
    order = _topo(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                leaves[id(node)] = (node, g)
            continue
        fn = node._backward
        node._backward = None
        node._consumed = True
        parents = node._parents
        node._parents = ()
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return leaves


def backward(output: Tensor, seed=None, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Differentiate ``output`` and accumulate into each reached leaf's ``.grad``.

    Returns a map from leaf tensor to its gradient from this pass. Tensors in
    ``wrt`` that the graph never touched map to zeros. The graph is consumed.
    """
    leaves = _run(output, seed)
    result = {}
    for node, g in leaves.values():
        node.grad = g.copy() if node.grad is None else node.grad + g
        result[node] = g
    for t in wrt or ():
        if t not in result:
            result[t] = np.zeros_like(t.data)
    return result


def grad(output: Tensor, inputs: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``."""
    leaves = _run(output, seed)
    return [leaves[id(t)][1] if id(t) in leaves else np.zeros_like(t.data) for t in inputs]
