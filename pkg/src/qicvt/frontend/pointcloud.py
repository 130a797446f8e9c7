"""Raw clouds, voxel grids and farthest point sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor


@dataclass
class RawPointCloud:
    """Unordered ``(N, 4)`` points: x, y, z in meters and reflectance in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        if len(pts) and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValueError("reflectance outside [0, 1]")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple
    voxel_size: tuple
    extents: tuple

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.extents) != 3:
            raise ValueError("grid spec needs 3 components per field")
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel sizes must be positive")
        if any(int(e) < 1 for e in self.extents):
            raise ValueError("extents must be >= 1")

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.voxel_size) * np.asarray(self.extents)

    def centers(self) -> np.ndarray:
        """Voxel centers ``(U*V*W, 3)`` in row-major (u, v, w) order."""
        idx = np.stack(np.meshgrid(*[np.arange(e) for e in self.extents], indexing="ij"), axis=-1)
        return (idx.reshape(-1, 3) + 0.5) * np.asarray(self.voxel_size) + np.asarray(self.origin)

    def coarsen(self, stride: int) -> "VoxelGridSpec":
        return VoxelGridSpec(self.origin, tuple(s * stride for s in self.voxel_size),
                             tuple(e // stride for e in self.extents))


@dataclass
class FeatureVolume:
    spec: VoxelGridSpec
    data: Tensor  # (U, V, W, C)
    mask: np.ndarray  # (U, V, W) occupancy
    stats: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def tokens(self) -> Tensor:
        return self.data.reshape(-1, self.channels)


def voxelize(cloud: RawPointCloud, spec: VoxelGridSpec) -> FeatureVolume:
    """Mean (x, y, z, reflectance) of the points in each voxel; out-of-grid points are dropped."""
    ext = np.asarray(spec.extents, dtype=np.int64)
    pts = cloud.points
    idx = np.floor((pts[:, :3] - np.asarray(spec.origin)) / np.asarray(spec.voxel_size)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < ext), axis=1) if len(pts) else np.zeros(0, dtype=bool)
    idx, pts = idx[inside], pts[inside]
    flat = np.ravel_multi_index(idx.T, ext) if len(idx) else np.zeros(0, dtype=np.int64)
    n = int(np.prod(ext))
    counts = np.bincount(flat, minlength=n)
    feats = np.zeros((n, 4))
    for c in range(4):
        sums = np.bincount(flat, weights=pts[:, c], minlength=n)
        np.divide(sums, counts, out=feats[:, c], where=counts > 0)
    shape = tuple(int(e) for e in ext)
    stats = {"in_bounds": int(inside.sum()), "dropped": int((~inside).sum()),
             "counts": counts.reshape(shape)}
    return FeatureVolume(spec, Tensor(feats.reshape(shape + (4,))), counts.reshape(shape) > 0, stats)


def _sqdist(xyz: np.ndarray, p: np.ndarray) -> np.ndarray:
    d = xyz - p
    return (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]


@dataclass
class KeypointSet:
    indices: np.ndarray
    k: int


def fps(cloud: RawPointCloud | np.ndarray, k: int, seed_index: int = 0) -> KeypointSet:
    """Greedy farthest point sampling on xyz; ties go to the lowest index.

    Distances are compared squared, ``(dx*dx + dy*dy) + dz*dz``, so ties are exact.
    """
    xyz = cloud.xyz if isinstance(cloud, RawPointCloud) else np.asarray(cloud)[:, :3]
    n = len(xyz)
    if n == 0 or k <= 0:
        return KeypointSet(np.zeros(0, dtype=np.int64), k)
    if k >= n:
        return KeypointSet(np.arange(n), k)
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    mind = _sqdist(xyz, xyz[seed_index])
    mind[seed_index] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, _sqdist(xyz, xyz[nxt]), out=mind, where=mind >= 0)
        mind[nxt] = -1.0
    return KeypointSet(chosen, k)
