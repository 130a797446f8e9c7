"""Global cross-modal fusion with reversible transformer blocks.

Image tokens run forward through a reversible stack; voxel tokens run through
the *inverse* pass of a second stack. The voxel result is aligned to the image
token grid by cross-attention, concatenated channel-wise with the image result
and projected back to the image channel count.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .frontend.pointcloud import FeatureVolume, VoxelGridSpec
from .geometry import Calibration
from .nn import MLP, LayerNorm, Linear, Module, param
from .tensor import Tensor, enable_grad, grad_enabled, no_grad


def tokenize(x: Tensor, pad_even: bool = False) -> tuple[Tensor, tuple]:
    """Flatten all spatial axes: ``(..., C) -> (n, C)``; optionally pad ``C`` to even."""
    shape = x.shape
    tokens = x.reshape(-1, shape[-1])
    if pad_even and shape[-1] % 2:
        tokens = T.concat([tokens, Tensor(np.zeros((tokens.shape[0], 1), dtype=x.dtype))], axis=1)
    return tokens, shape


def detokenize(tokens: Tensor, shape: tuple) -> Tensor:
    if tokens.shape[-1] != shape[-1]:
        tokens = T.split(tokens, [shape[-1], tokens.shape[-1] - shape[-1]], axis=1)[0]
    return tokens.reshape(shape)


def _heads(x: Tensor, h: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


class GlobalQueryAttention(Module):
    """Attention through a few global query tokens.

    The token mean is projected into ``n_global`` query tokens that attend over
    all tokens; every token then reads from those global contexts. Cost is
    linear in the token count.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, n_global: int = 4, zero_out: bool = True):
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.heads = heads
        self.n_global = n_global
        self.query_pool = Linear(rng, dim, n_global * dim)
        self.q = Linear(rng, dim, dim, bias=False)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim, bias=False)
        self.ctx_norm = LayerNorm(dim)
        self.q2 = Linear(rng, dim, dim, bias=False)
        self.k2 = Linear(rng, dim, dim, bias=False)
        self.out = Linear(rng, dim, dim, zero=zero_out)
        self.record = False
        self.weights: list[np.ndarray] = []

    def __call__(self, x: Tensor) -> Tensor:
        n, d = x.shape
        h = self.heads
        scale = 1.0 / math.sqrt(d // h)
        gq = self.query_pool(x.mean(axis=0, keepdims=True)).reshape(self.n_global, d)
        q = _heads(self.q(gq), h)
        k = _heads(self.k(x), h)
        v = _heads(self.v(x), h)
        a1 = T.softmax((q @ k.transpose(0, 2, 1)) * scale, axis=-1)
        ctx = self.ctx_norm(_merge(a1 @ v))
        q2 = _heads(self.q2(x), h)
        k2 = _heads(self.k2(ctx), h)
        a2 = T.softmax((q2 @ k2.transpose(0, 2, 1)) * scale, axis=-1)
        if self.record:
            self.weights = [a1.data, a2.data]
        return self.out(_merge(a2 @ _heads(ctx, h)))


class ReversibleBlock(Module):
    """Two-stream coupling: ``y1 = x1 + F(x2)``, ``y2 = x2 + G(y1)``."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 4, n_global: int = 4,
                 mlp_ratio: int = 2, zero_init: bool = True):
        if dim % 2:
            raise ValueError(f"channel count {dim} must be even")
        half = dim // 2
        if half % heads:
            raise ValueError(f"heads={heads} must divide half width {half}")
        self.dim = dim
        self.norm1 = LayerNorm(half)
        self.attn = GlobalQueryAttention(rng, half, heads, n_global, zero_out=zero_init)
        self.norm2 = LayerNorm(half)
        self.mlp = MLP(rng, half, mlp_ratio * half, half, zero_out=zero_init)

    def _f(self, x2: Tensor) -> Tensor:
        return self.attn(self.norm1(x2))

    def _g(self, y1: Tensor) -> Tensor:
        return self.mlp(self.norm2(y1))

    def _check(self, x: Tensor):
        if x.shape[-1] % 2:
            raise ValueError(f"channel count {x.shape[-1]} must be even")
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[-1]}")

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        half = self.dim // 2
        x1, x2 = T.split(x, [half, half], axis=1)
        y1 = x1 + self._f(x2)
        y2 = x2 + self._g(y1)
        return T.concat([y1, y2], axis=1)

    def inverse(self, y: Tensor) -> Tensor:
        self._check(y)
        half = self.dim // 2
        y1, y2 = T.split(y, [half, half], axis=1)
        x2 = y2 - self._g(y1)
        x1 = y1 - self._f(x2)
        return T.concat([x1, x2], axis=1)

    __call__ = forward


def reversible_block_forward(x: Tensor, block: ReversibleBlock) -> Tensor:
    return block.forward(x)


def reversible_block_inverse(y: Tensor, block: ReversibleBlock) -> Tensor:
    return block.inverse(y)


class ReversibleStack(Module):
    def __init__(self, rng: np.random.Generator, dim: int, depth: int = 2, heads: int = 4,
                 n_global: int = 4, zero_init: bool = True):
        self.blocks = [ReversibleBlock(rng, dim, heads, n_global, zero_init=zero_init) for _ in range(depth)]

    def forward(self, x: Tensor, recompute: bool = False) -> Tensor:
        if recompute and grad_enabled():
            return _recomputed(self, x, inverse=False)
        for b in self.blocks:
            x = b.forward(x)
        return x

    def inverse(self, y: Tensor, recompute: bool = False) -> Tensor:
        if recompute and grad_enabled():
            return _recomputed(self, y, inverse=True)
        for b in reversed(self.blocks):
            y = b.inverse(y)
        return y

    __call__ = forward


def _recomputed(stack: ReversibleStack, x: Tensor, inverse: bool) -> Tensor:
    """Run the stack without keeping intermediates; backward rebuilds them from the output."""
    blocks = list(reversed(stack.blocks)) if inverse else list(stack.blocks)
    params = stack.parameters()
    with no_grad():
        y = x
        for b in blocks:
            y = b.inverse(y) if inverse else b.forward(y)
    out_data = y.data

    def bw(g):
        acc = {id(p): np.zeros_like(p.data) for p in params}
        cur, gcur = out_data, g
        for b in reversed(blocks):
            step, undo = (b.inverse, b.forward) if inverse else (b.forward, b.inverse)
            with no_grad():
                prev = undo(Tensor(cur)).data
            xin = Tensor(prev, requires_grad=True)
            bp = b.parameters()
            with enable_grad():
                out = step(xin)
            gs = T.grad(out, [xin] + bp, seed=gcur)
            gcur = gs[0]
            for p, gp in zip(bp, gs[1:]):
                acc[id(p)] += gp
            cur = prev
        return (gcur,) + tuple(acc[id(p)] for p in params)

    return T._make(out_data, (x,) + tuple(params), bw, "reversible_stack")


def image_voxel_sqdist(calib: Calibration, grid_hw: tuple, spec: VoxelGridSpec) -> np.ndarray:
    """Squared distance, in feature-cell units, from each image cell center to each projected voxel center.

    Voxels that do not project in front of the camera get a large finite distance.
    """
    h, w = grid_hw
    img_h, img_w = calib.image_size
    su, sv = img_w / w, img_h / h
    uv, _ = calib.project(spec.centers())
    vu = uv[:, 0] / su
    vv = uv[:, 1] / sv
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    d2 = (rows.reshape(-1, 1) - vv[None, :]) ** 2 + (cols.reshape(-1, 1) - vu[None, :]) ** 2
    return np.where(np.isfinite(d2), np.minimum(d2, 1e4), 1e4)


class GAT(Module):
    def __init__(self, rng: np.random.Generator, image_channels: int = 16, voxel_channels: int = 64,
                 voxel_dim: int = 16, depth: int = 2, heads: int = 4, n_global: int = 4,
                 align_dim: int = 16, zero_init: bool = True, recompute: bool = False):
        if image_channels % 2 or voxel_dim % 2:
            raise ValueError("token widths must be even")
        self.image_stack = ReversibleStack(rng, image_channels, depth, heads, n_global, zero_init)
        self.voxel_proj = Linear(rng, voxel_channels, voxel_dim)
        self.voxel_stack = ReversibleStack(rng, voxel_dim, depth, heads, n_global, zero_init)
        self.align_q = Linear(rng, image_channels, align_dim, bias=False)
        self.align_k = Linear(rng, voxel_dim, align_dim, bias=False)
        self.locality = param(np.array([0.5413]))  # softplus -> 1.0 per squared cell
        self.fuse = Linear(rng, image_channels + voxel_dim, image_channels)
        self.select_image_half()
        self.recompute = recompute
        self.image_channels = image_channels

    def select_image_half(self):
        """Initialize the fusion projection to pass the image half through unchanged."""
        c = self.fuse.weight.shape[1]
        w = np.zeros(self.fuse.weight.shape)
        w[:c, :c] = np.eye(c)
        self.fuse.weight.data = w
        self.fuse.bias.data = np.zeros(c)

    def forward_transform(self, g_i: Tensor) -> Tensor:
        tokens, _ = tokenize(g_i)
        return self.image_stack.forward(tokens, recompute=self.recompute)

    def backward_transform(self, g_v: FeatureVolume | Tensor) -> Tensor:
        data = g_v.data if isinstance(g_v, FeatureVolume) else g_v
        tokens, _ = tokenize(data)
        return self.voxel_stack.inverse(self.voxel_proj(tokens), recompute=self.recompute)

    def align(self, y_f: Tensor, y_r: Tensor, sqdist: np.ndarray | None = None) -> Tensor:
        """Cross-attention pooling of ``n_V`` voxel tokens onto the ``n_I`` image tokens."""
        q = self.align_q(y_f)
        k = self.align_k(y_r)
        logits = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
        if sqdist is not None:
            logits = logits - T.softplus(self.locality) * Tensor(sqdist)
        return T.softmax(logits, axis=-1) @ y_r

    def fuse_global(self, y_f: Tensor, y_r: Tensor, shape: tuple, sqdist: np.ndarray | None = None) -> Tensor:
        aligned = self.align(y_f, y_r, sqdist)
        return detokenize(self.fuse(T.concat([y_f, aligned], axis=1)), shape)

    def __call__(self, g_i: Tensor, g_v: FeatureVolume | Tensor, sqdist: np.ndarray | None = None) -> Tensor:
        y_f = self.forward_transform(g_i)
        y_r = self.backward_transform(g_v)
        return self.fuse_global(y_f, y_r, g_i.shape, sqdist)
