"""Parameter containers, basic layers and the SGD optimizer."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-registered parameters and submodules, walked in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def glorot(rng: np.random.Generator, din: int, dout: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (din + dout))
    return rng.uniform(-bound, bound, size=(din, dout))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, din: int, dout: int, bias: bool = True, zero: bool = False):
        self.weight = param(np.zeros((din, dout)) if zero else glorot(rng, din, dout))
        self.bias = param(np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a GELU between them."""

    def __init__(self, rng, din: int, hidden: int, dout: int, zero_out: bool = False):
        self.fc1 = Linear(rng, din, hidden)
        self.fc2 = Linear(rng, hidden, dout, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and optional global-norm clipping.

    ``lr_scales`` optionally multiplies the learning rate per parameter.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, clip_norm: float | None = None,
                 lr_scales: Sequence[float] | None = None):
        self.params = params
        self.lr = lr
        self.lr_scales = [1.0] * len(params) if lr_scales is None else [float(x) for x in lr_scales]
        if len(self.lr_scales) != len(params):
            raise ValueError("need one learning-rate scale per parameter")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p, g, v, k in zip(self.params, grads, self.velocity, self.lr_scales):
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * k * v
        return norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam(SGD):
    """Adam with bias correction; same clipping, decay and per-parameter scales as :class:`SGD`."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None,
                 lr_scales: Sequence[float] | None = None):
        super().__init__(params, lr, betas[0], weight_decay, clip_norm, lr_scales)
        self.beta2 = betas[1]
        self.eps = eps
        self.second = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.momentum ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v, k in zip(self.params, grads, self.velocity, self.second, self.lr_scales):
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.momentum
            m += (1.0 - self.momentum) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * k * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
