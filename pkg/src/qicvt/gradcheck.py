"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, grad


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every coordinate of ``x.data``.

    ``x`` is perturbed in place and restored afterwards.
    """
    out = np.zeros_like(x.data)
    flat, g = x.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` takes no arguments and reads ``x`` (one tensor or several) from its
    closure; it must return a scalar tensor.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f(x) is not finite")
    if out.data.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    analytic = grad(out, xs)
    worst = 0.0
    for t, a in zip(xs, analytic):
        num = numerical_gradient(f, t, h)
        err = np.abs(a - num) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
