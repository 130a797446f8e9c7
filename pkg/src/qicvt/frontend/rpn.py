"""Anchor-based proposal head over the stride-4 volume."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..geometry import wrap_angle
from ..metrics.iou import nms_bev
from ..nn import Linear, Module
from ..tensor import Tensor, no_grad
from .backbone import ConvLayer
from .pointcloud import FeatureVolume, VoxelGridSpec
from .roi import ELEVATED_Z

ANCHOR_YAWS = (0.0, np.pi / 2)
N_REG = 8  # dx, dy, dz, dl, dw, dh, sin(2 dyaw), cos(2 dyaw): orientation only, heading mod pi
N_WINDOW_STATS = 12
N_CELL_STATS = 2 * N_WINDOW_STATS  # default windows: the cell alone and the cell plus one ring


@dataclass
class Proposal:
    box: np.ndarray
    score: float

    def __post_init__(self):
        box = np.array(self.box, dtype=np.float64).reshape(7)
        if np.any(box[3:6] <= 0):
            raise ValueError("proposal sizes must be positive")
        box[6] = wrap_angle(box[6])
        self.box = box


def make_anchors(spec: VoxelGridSpec, sizes=((3.0, 1.4, 1.6),)) -> np.ndarray:
    """Axis-aligned anchors per BEV cell, one per size and orientation: ``(U*V*A, 7)``.

    Order is cell-major, then size, then orientation. Anchors rest on z = 0.
    """
    u, v = spec.extents[0], spec.extents[1]
    ox, oy = spec.origin[0], spec.origin[1]
    sx, sy = spec.voxel_size[0], spec.voxel_size[1]
    cx = ox + (np.arange(u) + 0.5) * sx
    cy = oy + (np.arange(v) + 0.5) * sy
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    rows = []
    for x, y in zip(gx.ravel(), gy.ravel()):
        for size in sizes:
            for yaw in ANCHOR_YAWS:
                rows.append((x, y, size[2] / 2, size[0], size[1], size[2], yaw))
    return np.array(rows)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Residuals of ``boxes`` w.r.t. ``anchors``; yaw is encoded modulo pi (double angle)."""
    da = np.hypot(anchors[:, 3], anchors[:, 4])
    dyaw = 2.0 * (boxes[:, 6] - anchors[:, 6])
    return np.column_stack([
        (boxes[:, 0] - anchors[:, 0]) / da,
        (boxes[:, 1] - anchors[:, 1]) / da,
        (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5],
        np.log(boxes[:, 3] / anchors[:, 3]),
        np.log(boxes[:, 4] / anchors[:, 4]),
        np.log(boxes[:, 5] / anchors[:, 5]),
        np.sin(dyaw),
        np.cos(dyaw),
    ])


def decode_boxes(anchors: np.ndarray, reg: np.ndarray) -> np.ndarray:
    da = np.hypot(anchors[:, 3], anchors[:, 4])
    sizes = anchors[:, 3:6] * np.exp(np.clip(reg[:, 3:6], -5.0, 5.0))
    yaw = wrap_angle(anchors[:, 6] + 0.5 * np.arctan2(reg[:, 6], reg[:, 7]))
    return np.column_stack([
        anchors[:, 0] + reg[:, 0] * da,
        anchors[:, 1] + reg[:, 1] * da,
        anchors[:, 2] + reg[:, 2] * anchors[:, 5],
        sizes,
        yaw,
    ])


def cell_statistics(points: np.ndarray, spec: VoxelGridSpec, stride: int, windows=(0.0, 1.0)) -> np.ndarray:
    """Fixed per-BEV-cell summary of the raw returns, ``(U/s, V/s, 12 * len(windows))``.

    ``spec`` is the stride-1 grid. Statistics are computed once per window size
    and concatenated.
    """
    return np.concatenate([_window_statistics(points, spec, stride, w) for w in windows], axis=-1)


def _window_statistics(points: np.ndarray, spec: VoxelGridSpec, stride: int, window: float) -> np.ndarray:
    """Only points above ``ELEVATED_Z`` count. Per cell: log count inside the cell,
    then over a square window of ``1 + 2 * window`` cells around it: log count,
    centroid offset from the cell center (cell units), max and mean height
    (halved meters), mean reflectance, principal-axis orientation as
    ``(cos 2t, sin 2t)`` scaled by anisotropy, the two principal spreads (m) and
    the log of their ratio.
    """
    u, v, _ = spec.extents
    cu, cv = u // stride, v // stride
    sx, sy = spec.voxel_size[0] * stride, spec.voxel_size[1] * stride
    pts = np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, pts.shape[-1] if pts.size else 4)
    pts = pts[pts[:, 2] > ELEVATED_Z]
    out = np.zeros((cu, cv, N_WINDOW_STATS))
    if len(pts) == 0:
        return out
    fx = (pts[:, 0] - spec.origin[0]) / sx
    fy = (pts[:, 1] - spec.origin[1]) / sy
    for i in range(cu):
        near_x = np.abs(fx - (i + 0.5)) <= 0.5 + window
        if not near_x.any():
            continue
        for j in range(cv):
            near = near_x & (np.abs(fy - (j + 0.5)) <= 0.5 + window)
            n = int(near.sum())
            if n == 0:
                continue
            inside = near & (np.abs(fx - (i + 0.5)) < 0.5) & (np.abs(fy - (j + 0.5)) < 0.5)
            q = pts[near]
            cx = spec.origin[0] + (i + 0.5) * sx
            cy = spec.origin[1] + (j + 0.5) * sy
            mx, my = q[:, 0].mean(), q[:, 1].mean()
            dx, dy = q[:, 0] - mx, q[:, 1] - my
            sxx, syy, sxy = (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()
            tr = sxx + syy
            root = np.sqrt(((sxx - syy) / 2) ** 2 + sxy * sxy)
            lam1, lam2 = tr / 2 + root, max(tr / 2 - root, 0.0)
            o = out[i, j]
            o[0] = np.log1p(inside.sum())
            o[1] = np.log1p(n)
            o[2] = (mx - cx) / sx
            o[3] = (my - cy) / sy
            o[4] = q[:, 2].max() / 2.0
            o[5] = q[:, 2].mean() / 2.0
            o[6] = q[:, 3].mean()
            if tr > 1e-12:
                o[7] = (sxx - syy) / tr
                o[8] = 2 * sxy / tr
            o[9] = np.sqrt(lam1)
            o[10] = np.sqrt(lam2)
            o[11] = 0.5 * np.log((lam1 + 1e-3) / (lam2 + 1e-3))
    return out


class RPNHead(Module):
    """BEV 3x3 conv over the height-flattened stride-4 volume, then per-anchor score and residuals.

    With ``cell_stats`` the conv also sees fixed statistics of the raw returns in
    each cell and its neighbourhood (see :func:`cell_statistics`).
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, hidden: int = 64,
                 anchor_sizes=((3.0, 1.4, 1.6),), prior: float = 0.05, cell_stats: bool = False):
        self.cell_stats = cell_stats
        if cell_stats:
            in_channels += N_CELL_STATS
        self.conv = ConvLayer(rng, 2, in_channels, hidden, 1)
        self.anchor_sizes = tuple(tuple(float(x) for x in a) for a in anchor_sizes)
        self.per_cell = len(self.anchor_sizes) * len(ANCHOR_YAWS)
        self.out = Linear(rng, hidden, self.per_cell * (1 + N_REG))
        self.out.weight.data *= 0.1
        bias = np.zeros((self.per_cell, 1 + N_REG))
        bias[:, 0] = np.log(prior / (1 - prior))
        bias[:, -1] = 1.0  # cos(2 dyaw) starts at 1
        self.out.bias.data = bias.ravel()

    def anchors(self, spec: VoxelGridSpec) -> np.ndarray:
        return make_anchors(spec, self.anchor_sizes)

    def __call__(self, volume: FeatureVolume, stats: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Objectness logits ``(n,)`` and residuals ``(n, 8)`` in anchor order."""
        u, v, w, c = volume.data.shape
        bev = volume.data.reshape(u, v, w * c)
        if self.cell_stats:
            if stats is None or stats.shape != (u, v, N_CELL_STATS):
                raise ValueError(f"this head needs cell statistics of shape {(u, v, N_CELL_STATS)}")
            bev = T.concat([bev, Tensor(stats)], axis=-1)
        h = T.relu(self.conv(bev))
        out = self.out(h.reshape(u * v, -1)).reshape(u * v * self.per_cell, 1 + N_REG)
        logits, reg = T.split(out, [1, N_REG], axis=1)
        return logits.reshape(-1), reg


def select_proposals(boxes: np.ndarray, scores: np.ndarray, max_proposals: int,
                     nms_threshold: float = 0.7, pre_nms: int | None = None) -> list[Proposal]:
    """NMS over the ``pre_nms`` best-scoring boxes (default ``4 * max_proposals``)."""
    if max_proposals <= 0 or len(boxes) == 0:
        return []
    pre = 4 * max_proposals if pre_nms is None else pre_nms
    top = np.argsort(-np.asarray(scores), kind="stable")[:pre]
    keep = top[nms_bev(boxes[top], scores[top], nms_threshold, max_keep=max_proposals)]
    return [Proposal(boxes[i], float(scores[i])) for i in keep]


def propose_rois(volumes: list[FeatureVolume], max_proposals: int, head: RPNHead,
                 nms_threshold: float = 0.7, points: np.ndarray | None = None) -> list[Proposal]:
    """Score anchors on the stride-4 volume, decode, suppress, keep the best ``max_proposals``.

    ``points`` is the raw ``(n, 4)`` cloud, needed when the head uses cell statistics.
    """
    if max_proposals <= 0:
        return []
    vol = volumes[2]
    stats = cell_statistics(points, volumes[0].spec, 4) if head.cell_stats and points is not None else None
    with no_grad():
        logits, reg = head(vol, stats)
    anchors = head.anchors(vol.spec)
    boxes = decode_boxes(anchors, reg.data)
    scores = 1.0 / (1.0 + np.exp(-logits.data))
    return select_proposals(boxes, scores, max_proposals, nms_threshold)
