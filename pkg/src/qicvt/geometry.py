"""Oriented boxes and the pinhole camera.

Boxes are 7-vectors ``(cx, cy, cz, l, w, h, yaw)``: ``l`` runs along the
heading axis, ``cz`` is the vertical center and ``yaw`` is measured from +x
toward +y. World frame: x forward, y left, z up.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASSES = ("VEH", "PED", "CYC")


def wrap_angle(a):
    """Wrap into ``(-pi, pi]``."""
    a = np.asarray(a, dtype=np.float64)
    out = a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))
    return float(out) if out.ndim == 0 else out


def rotation_2d(yaw) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


def bev_corners(box) -> np.ndarray:
    """Four BEV corners, counter-clockwise, shape ``(4, 2)``."""
    return bev_corners_batch(box)[0]


def bev_corners_batch(boxes: np.ndarray) -> np.ndarray:
    """``(n, 4, 2)`` counter-clockwise corners for ``(n, 7)`` boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    sx = np.array([1.0, 1.0, -1.0, -1.0]) * 0.5
    sy = np.array([-1.0, 1.0, 1.0, -1.0]) * 0.5
    lx = boxes[:, 3:4] * sx
    ly = boxes[:, 4:5] * sy
    c, s = np.cos(boxes[:, 6:7]), np.sin(boxes[:, 6:7])
    x = boxes[:, 0:1] + c * lx - s * ly
    y = boxes[:, 1:2] + s * lx + c * ly
    return np.stack([x, y], axis=-1)


def box_corners_3d(box) -> np.ndarray:
    """Eight corners ``(8, 3)``: bottom face then top face."""
    bev = bev_corners(box)
    cz, h = box[2], box[5]
    bottom = np.column_stack([bev, np.full(4, cz - h / 2)])
    top = np.column_stack([bev, np.full(4, cz + h / 2)])
    return np.vstack([bottom, top])


def to_box_frame(points: np.ndarray, box) -> np.ndarray:
    """Express ``(n, 3)`` points in the box frame (origin at center, x along heading)."""
    box = np.asarray(box, dtype=np.float64)
    d = points[:, :3] - box[:3]
    c, s = np.cos(box[6]), np.sin(box[6])
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]])


def points_in_box(points: np.ndarray, box, margin: float = 0.0) -> np.ndarray:
    """Closed containment test; ``margin`` enlarges every half-extent."""
    local = to_box_frame(points, box)
    half = np.asarray(box[3:6], dtype=np.float64) / 2 + margin
    return np.all(np.abs(local) <= half, axis=1)


def points_in_boxes(points: np.ndarray, boxes: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """``(n_boxes, n_points)`` containment mask."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    d = points[None, :, :3] - boxes[:, None, :3]
    c = np.cos(boxes[:, 6])[:, None]
    s = np.sin(boxes[:, 6])[:, None]
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    half = boxes[:, 3:6] / 2 + margin
    return ((np.abs(lx) <= half[:, 0:1]) & (np.abs(ly) <= half[:, 1:2])
            & (np.abs(d[..., 2]) <= half[:, 2:3]))


@dataclass(frozen=True)
class Calibration:
    """Pinhole camera. ``rotation`` maps world axes to camera axes (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    position: tuple = (0.0, 0.0, 1.8)
    rotation: tuple = ((0.0, -1.0, 0.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))
    image_size: tuple = (32, 32)  # (H, W) in pixels
    near: float = 0.1

    @classmethod
    def forward_looking(cls, height: int, width: int, hfov_deg: float = 90.0, cam_height: float = 1.8):
        f = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
        return cls(fx=f, fy=f, cx=width / 2, cy=height / 2, position=(0.0, 0.0, cam_height),
                   image_size=(height, width))

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        r = np.asarray(self.rotation, dtype=np.float64)
        return (np.asarray(points, dtype=np.float64)[..., :3] - np.asarray(self.position)) @ r.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(n, 2)`` as (u, v) and depth ``(n,)``.

        Points at or behind the near plane get NaN pixel coordinates.
        """
        cam = self.to_camera(points)
        depth = cam[..., 2]
        ok = depth > self.near
        safe = np.where(ok, depth, 1.0)
        u = np.where(ok, self.fx * cam[..., 0] / safe + self.cx, np.nan)
        v = np.where(ok, self.fy * cam[..., 1] / safe + self.cy, np.nan)
        return np.stack([u, v], axis=-1), depth
