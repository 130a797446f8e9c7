"""Sparse local fusion: per-modality noisy top-k mixtures of experts and the refinement head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import shapely

from . import tensor as T
from .geometry import Calibration, box_corners_3d, wrap_angle
from .nn import MLP, Linear, Module, glorot, param
from .tensor import Tensor

N_CLASSES = 3
N_RESIDUALS = 8  # dcx, dcy, dcz, dl, dw, dh, sin(dyaw), cos(dyaw)


class GatingNetwork(Module):
    """Produces one logit per expert.

    ``formula="cited"``: ``x W_g + eps * softplus(x W_n)`` with standard normal
    ``eps`` in training. ``formula="literal"``: ``softplus(x * delta) W_g`` with
    ``delta ~ N(1, sigma^2)`` per input feature in training and ``delta = 1`` otherwise.
    """

    def __init__(self, rng: np.random.Generator, din: int, n_experts: int = 4, k: int = 2,
                 noise: bool = True, formula: str = "cited", literal_sigma: float = 0.1):
        if not 1 <= k <= n_experts:
            raise ValueError(f"k={k} must be in [1, {n_experts}]")
        if formula not in ("cited", "literal"):
            raise ValueError(f"unknown gate formula {formula!r}")
        self.w_gate = param(glorot(rng, din, n_experts) * 0.5)
        self.w_noise = param(np.zeros((din, n_experts)))
        self.n_experts = n_experts
        self.k = k
        self.noise = noise
        self.formula = formula
        self.literal_sigma = literal_sigma

    def sample_noise(self, rng: np.random.Generator, n: int, din: int) -> np.ndarray:
        if self.formula == "cited":
            return rng.standard_normal((n, self.n_experts))
        return 1.0 + self.literal_sigma * rng.standard_normal((n, din))

    def __call__(self, x: Tensor, rng=None, train_mode: bool = False, noise: np.ndarray | None = None) -> Tensor:
        return gating_logits(x, self, rng, train_mode, noise)


def gating_logits(x: Tensor, p: GatingNetwork, rng: np.random.Generator | None = None,
                  train_mode: bool = False, noise: np.ndarray | None = None) -> Tensor:
    """Expert logits ``(P, N)`` for inputs ``(P, D)``; ``noise`` overrides sampling from ``rng``."""
    noisy = train_mode and p.noise
    if noisy and noise is None:
        if rng is None:
            raise ValueError("train-mode gating needs an rng or an explicit noise sample")
        noise = p.sample_noise(rng, x.shape[0], x.shape[1])
    if p.formula == "literal":
        scaled = x * Tensor(noise) if noisy else x
        return T.softplus(scaled) @ p.w_gate
    clean = x @ p.w_gate
    if not noisy:
        return clean
    return clean + Tensor(noise) * T.softplus(x @ p.w_noise)


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices ``(P, k)`` of the k largest logits per row; ties go to the lower index."""
    logits = np.atleast_2d(logits)
    if not 1 <= k <= logits.shape[-1]:
        raise ValueError(f"k={k} out of range for {logits.shape[-1]} experts")
    return np.argsort(-logits, axis=-1, kind="stable")[:, :k]


def top_k_gate(logits: Tensor, k: int, indices: np.ndarray | None = None) -> Tensor:
    """Softmax over the top-k logits with the rest masked to ``-inf``.

    ``indices`` fixes the selected experts (used to hold the mask constant).
    """
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.reshape(1, -1)
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} experts")
    if indices is None:
        indices = top_k_indices(logits.data, k)
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, np.asarray(indices).reshape(logits.shape[0], -1), True, axis=-1)
    w = T.softmax(T.masked_fill(logits, ~keep, -np.inf), axis=-1)
    return w.reshape(-1) if squeeze else w


@dataclass
class MoEOutput:
    y: Tensor
    weights: Tensor
    indices: np.ndarray
    expert_calls: int


class MixtureOfExperts(Module):
    def __init__(self, rng: np.random.Generator, din: int, dout: int, hidden: int = 32,
                 n_experts: int = 4, k: int = 2, noise: bool = True, formula: str = "cited"):
        self.gate = GatingNetwork(rng, din, n_experts, k, noise, formula)
        self.experts = [MLP(rng, din, hidden, dout) for _ in range(n_experts)]
        self.dout = dout
        self.calls = 0  # expert evaluations (rows), cumulative

    def __call__(self, x: Tensor, rng=None, train_mode: bool = False, noise=None, indices=None) -> MoEOutput:
        return moe_forward(x, self, rng, train_mode, noise, indices)


def moe_forward(x: Tensor, moe: MixtureOfExperts, rng=None, train_mode: bool = False,
                noise: np.ndarray | None = None, indices: np.ndarray | None = None) -> MoEOutput:
    """``y = sum_i w_i E_i(x)``; each expert only sees the rows that selected it."""
    logits = gating_logits(x, moe.gate, rng, train_mode, noise)
    if indices is None:
        indices = top_k_indices(logits.data, moe.gate.k)
    w = top_k_gate(logits, moe.gate.k, indices)
    n = x.shape[0]
    parts = []
    calls = 0
    for i, expert in enumerate(moe.experts):
        rows = np.nonzero((indices == i).any(axis=1))[0]
        if len(rows) == 0:
            continue
        out = expert(T.gather_rows(x, rows))
        calls += len(rows)
        parts.append(T.scatter_rows(out * T.gather_rows(w, rows)[:, i:i + 1], rows, n))
    moe.calls += calls
    if not parts:
        y = Tensor(np.zeros((n, moe.dout)))
    else:
        y = parts[0]
        for p in parts[1:]:
            y = y + p
    return MoEOutput(y, w, indices, calls)


def load_balance_loss(weights: Tensor) -> Tensor:
    """Squared coefficient of variation of per-expert importance over the batch."""
    imp = weights.sum(axis=0)
    m = imp.mean()
    var = ((imp - m) ** 2.0).mean()
    return var / (m * m + 1e-10)


class LocalFusion(Module):
    """``concat(y_L, y_I) -> linear -> GELU -> linear``."""

    def __init__(self, rng: np.random.Generator, d_l: int, d_i: int, c_f: int, hidden: int = 64):
        self.net = MLP(rng, d_l + d_i, hidden, c_f)
        self.c_f = c_f

    def __call__(self, y_l: Tensor, y_i: Tensor) -> Tensor:
        return fuse_local(y_l, y_i, self)


def fuse_local(y_l: Tensor, y_i: Tensor, params: LocalFusion) -> Tensor:
    return params.net(T.concat([y_l, y_i], axis=1))


@dataclass
class FusedLocalFeature:
    y: Tensor
    y_l: Tensor
    y_i: Tensor
    aux_loss: Tensor | None = None
    expert_calls: dict = field(default_factory=dict)


class SELF(Module):
    """Dual-gated expert fusion of RoI LiDAR features and image context."""

    def __init__(self, rng: np.random.Generator, d_lidar: int, d_image: int, d_expert: int = 32,
                 hidden: int = 32, c_f: int = 32, n_experts: int = 4, k: int = 2, noise: bool = True,
                 formula: str = "cited", balance: float = 0.0):
        self.moe_l = MixtureOfExperts(rng, d_lidar, d_expert, hidden, n_experts, k, noise, formula)
        self.moe_i = MixtureOfExperts(rng, d_image, d_expert, hidden, n_experts, k, noise, formula)
        self.fusion = LocalFusion(rng, d_expert, d_expert, c_f, hidden=2 * d_expert)
        self.balance = balance

    def __call__(self, g_l: Tensor, g_i: Tensor, rng=None, train_mode: bool = False,
                 noise_l=None, noise_i=None, indices_l=None, indices_i=None) -> FusedLocalFeature:
        rng_l = rng_i = None
        if rng is not None:
            rng_l, rng_i = rng.spawn(2)
        out_l = self.moe_l(g_l, rng_l, train_mode, noise_l, indices_l)
        out_i = self.moe_i(g_i, rng_i, train_mode, noise_i, indices_i)
        y = fuse_local(out_l.y, out_i.y, self.fusion)
        aux = None
        if self.balance > 0 and train_mode:
            aux = (load_balance_loss(out_l.weights) + load_balance_loss(out_i.weights)) * self.balance
        return FusedLocalFeature(y, out_l.y, out_i.y, aux, {"lidar": out_l.expert_calls, "image": out_i.expert_calls})


class ConcatFusion(Module):
    """Dense replacement for SELF: one MLP over the concatenated modalities."""

    def __init__(self, rng: np.random.Generator, d_lidar: int, d_image: int, hidden: int, c_f: int = 32):
        self.net = MLP(rng, d_lidar + d_image, hidden, c_f)

    def __call__(self, g_l: Tensor, g_i: Tensor, rng=None, train_mode: bool = False, **_) -> FusedLocalFeature:
        y = self.net(T.concat([g_l, g_i], axis=1))
        return FusedLocalFeature(y, g_l, g_i)


# ---------------------------------------------------------------------------
# image context per proposal
# ---------------------------------------------------------------------------

def context_weights(boxes: np.ndarray, calib: Calibration, grid_hw: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Averaging weights ``(P, H*W)`` over feature cells under each box's projected hull.

    Returns the weights and a boolean ``empty`` flag per box (behind the camera
    or projecting entirely off the image). A hull that covers no cell center
    falls back to the cell holding the projected corners' centroid.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    h, w = grid_hw
    img_h, img_w = calib.image_size
    su, sv = img_w / w, img_h / h
    n_cells = h * w
    weights = np.zeros((len(boxes), n_cells))
    empty = np.zeros(len(boxes), dtype=bool)
    if len(boxes) == 0:
        return weights, empty
    corners = np.stack([box_corners_3d(b) for b in boxes])  # (P, 8, 3)
    uv, depth = calib.project(corners.reshape(-1, 3))
    uv = uv.reshape(len(boxes), 8, 2) / np.array([su, sv])
    depth = depth.reshape(len(boxes), 8)
    behind = (depth <= calib.near).any(axis=1)
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    cu, cv = cols.ravel(), rows.ravel()
    front = np.nonzero(~behind)[0]
    hulls = shapely.convex_hull(shapely.multipoints(uv[front]))
    inside = shapely.intersects_xy(hulls[:, None], cu[None, :], cv[None, :])
    for j, i in enumerate(front):
        hit = inside[j]
        if hit.any():
            weights[i, hit] = 1.0 / hit.sum()
            continue
        c = uv[i].mean(axis=0)
        col, row = int(np.floor(c[0])), int(np.floor(c[1]))
        if 0 <= col < w and 0 <= row < h:
            weights[i, row * w + col] = 1.0
        else:
            empty[i] = True
    empty |= behind
    return weights, empty


def gather_image_context(boxes, g_vi: Tensor, calib: Calibration, empty_context: Tensor) -> Tensor:
    """Mean feature of ``g_vi`` ``(H, W, C)`` under each box's image footprint, ``(P, C)``."""
    boxes = np.asarray([getattr(b, "box", b) for b in boxes], dtype=np.float64).reshape(-1, 7)
    h, w, c = g_vi.shape
    weights, empty = context_weights(boxes, calib, (h, w))
    ctx = Tensor(weights) @ g_vi.reshape(h * w, c)
    return ctx + Tensor(empty.astype(np.float64)[:, None]) * empty_context


# ---------------------------------------------------------------------------
# refinement head
# ---------------------------------------------------------------------------

@dataclass
class DetectionOutput:
    class_logits: np.ndarray  # (P, 3)
    residuals: np.ndarray  # (P, 7): dcx, dcy, dcz, dl, dw, dh, dyaw
    confidence: np.ndarray  # (P,)
    boxes: np.ndarray  # (P, 7) decoded


def decode_refinement(proposals: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Apply ``(dcx, dcy, dcz, dl, dw, dh, dyaw)``; center offsets live in the proposal frame."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    r = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(p[:, 3], p[:, 4])
    c, s = np.cos(p[:, 6]), np.sin(p[:, 6])
    dx, dy = r[:, 0] * diag, r[:, 1] * diag
    return np.column_stack([
        p[:, 0] + c * dx - s * dy,
        p[:, 1] + s * dx + c * dy,
        p[:, 2] + r[:, 2] * p[:, 5],
        p[:, 3:6] * np.exp(np.clip(r[:, 3:6], -5.0, 5.0)),
        wrap_angle(p[:, 6] + r[:, 6]),
    ])


def encode_refinement(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_refinement`, with ``dyaw`` split into (sin, cos)."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(p[:, 3], p[:, 4])
    c, s = np.cos(p[:, 6]), np.sin(p[:, 6])
    dx, dy = t[:, 0] - p[:, 0], t[:, 1] - p[:, 1]
    dyaw = t[:, 6] - p[:, 6]
    return np.column_stack([
        (c * dx + s * dy) / diag,
        (-s * dx + c * dy) / diag,
        (t[:, 2] - p[:, 2]) / p[:, 5],
        np.log(t[:, 3:6] / p[:, 3:6]),
        np.sin(dyaw),
        np.cos(dyaw),
    ])


class DetectHead(Module):
    def __init__(self, rng: np.random.Generator, c_f: int, hidden: int = 64):
        self.hidden = Linear(rng, c_f, hidden)
        self.out = Linear(rng, hidden, N_CLASSES + 1 + N_RESIDUALS)
        self.out.weight.data *= 0.1
        b = np.zeros(N_CLASSES + 1 + N_RESIDUALS)
        b[-1] = 1.0  # cos(dyaw) = 1 at start
        self.out.bias.data = b

    def __call__(self, fused: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Class logits ``(P, 3)``, confidence logit ``(P,)``, raw residuals ``(P, 8)``."""
        out = self.out(T.gelu(self.hidden(fused)))
        cls, conf, reg = T.split(out, [N_CLASSES, 1, N_RESIDUALS], axis=1)
        return cls, conf.reshape(-1), reg


def detect_head(fused: FusedLocalFeature | Tensor, proposals, head: DetectHead) -> DetectionOutput:
    y = fused.y if isinstance(fused, FusedLocalFeature) else fused
    boxes = np.asarray([getattr(p, "box", p) for p in proposals], dtype=np.float64).reshape(-1, 7)
    cls, conf, reg = head(y)
    return decode_outputs(boxes, cls.data, conf.data, reg.data)


def decode_outputs(boxes: np.ndarray, cls: np.ndarray, conf: np.ndarray, reg: np.ndarray) -> DetectionOutput:
    residuals = np.column_stack([reg[:, :6], np.arctan2(reg[:, 6], reg[:, 7])])
    return DetectionOutput(cls, residuals, 1.0 / (1.0 + np.exp(-conf)), decode_refinement(boxes, residuals))
