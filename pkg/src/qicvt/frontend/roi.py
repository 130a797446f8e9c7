"""RoI pooling over the multi-scale volumes plus raw-point position descriptors."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..geometry import points_in_boxes
from ..nn import Module, glorot, param
from ..tensor import Tensor
from .pointcloud import FeatureVolume, VoxelGridSpec

N_POINT_FEATURES = 20
ELEVATED_Z = 0.25  # meters above the ground plane; lower returns are treated as ground


def pooling_matrix(spec: VoxelGridSpec, boxes: np.ndarray) -> np.ndarray:
    """Row-normalized ``(P, n_cells)`` weights averaging voxels whose centers lie in each box."""
    inside = points_in_boxes(spec.centers(), boxes).astype(np.float64)
    counts = inside.sum(axis=1, keepdims=True)
    return np.divide(inside, counts, out=np.zeros_like(inside), where=counts > 0)


class RoIPool(Module):
    def __init__(self, rng: np.random.Generator, scale_channels, c_out: int, extra_dim: int = 0):
        din = sum(scale_channels) + extra_dim
        self.proj = param(glorot(rng, din, c_out))
        self.empty = param(np.zeros(c_out))
        self.extra_dim = extra_dim

    def __call__(self, volumes, boxes, extra=None) -> Tensor:
        return roi_pool(volumes, boxes, self, extra)


def roi_pool(volumes: list[FeatureVolume], boxes, params: RoIPool, extra: np.ndarray | None = None) -> Tensor:
    """Per-proposal feature ``(P, C_L)``.

    Each scale contributes the mean feature of the voxels whose centers fall
    inside the box (zero when none do); scales are concatenated and projected.
    A box containing no voxel center at any scale adds the learned empty bias.
    """
    boxes = np.asarray([getattr(b, "box", b) for b in boxes], dtype=np.float64).reshape(-1, 7)
    pooled, any_hit = [], np.zeros(len(boxes), dtype=bool)
    for vol in volumes:
        w = pooling_matrix(vol.spec, boxes)
        any_hit |= w.sum(axis=1) > 0
        pooled.append(Tensor(w) @ vol.tokens())
    if params.extra_dim:
        if extra is None or extra.shape != (len(boxes), params.extra_dim):
            raise ValueError(f"expected extra features of shape ({len(boxes)}, {params.extra_dim})")
        pooled.append(Tensor(extra))
    feat = T.concat(pooled, axis=1) @ params.proj
    empty = Tensor((~any_hit).astype(np.float64)[:, None])
    return feat + empty * params.empty


def roi_point_features(points: np.ndarray, boxes: np.ndarray, margin: float = 0.5) -> np.ndarray:
    """Fixed descriptor of the raw points inside each (enlarged) box, in the box frame.

    Columns: log count of all points, log count of elevated points, then over the
    elevated points only: mean/min/max of local xyz (halved meters), reflectance
    weighted offset of the local xy mean, mean reflectance; then log box size,
    range / 20 and the sensor bearing in the box frame (cos, sin).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes), N_POINT_FEATURES))
    out[:, 14:17] = np.log(boxes[:, 3:6])
    out[:, 17] = np.hypot(boxes[:, 0], boxes[:, 1]) / 20.0
    bearing = np.arctan2(-boxes[:, 1], -boxes[:, 0]) - boxes[:, 6]
    out[:, 18] = np.cos(bearing)
    out[:, 19] = np.sin(bearing)
    if len(points) == 0 or len(boxes) == 0:
        return out
    inside = points_in_boxes(points, boxes, margin)
    elevated = points[:, 2] > ELEVATED_Z
    for i in np.nonzero(inside.any(axis=1))[0]:
        out[i, 0] = np.log1p(inside[i].sum())
        sel = points[inside[i] & elevated]
        if len(sel) == 0:
            continue
        d = sel[:, :3] - boxes[i, :3]
        c, s = np.cos(boxes[i, 6]), np.sin(boxes[i, 6])
        local = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]]) / 2.0
        refl = sel[:, 3]
        mu = local.mean(axis=0)
        out[i, 1] = np.log1p(len(sel))
        out[i, 2:5] = mu
        out[i, 5:8] = local.min(axis=0)
        out[i, 8:11] = local.max(axis=0)
        wsum = refl.sum()
        if wsum > 0:
            out[i, 11:13] = (local[:, :2] * refl[:, None]).sum(axis=0) / wsum - mu[:2]
        out[i, 13] = refl.mean()
    return out
