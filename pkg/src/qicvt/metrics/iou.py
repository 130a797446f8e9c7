"""Rotated-box overlap: BEV polygon intersection times vertical overlap.

``iou_3d`` clips one BEV rectangle against the other with Sutherland-Hodgman.
``iou_3d_matrix`` computes all pairs at once by collecting the intersection
polygon's vertices (contained corners plus edge crossings) and sorting them by
angle, which is what evaluation and NMS use.
"""
from __future__ import annotations

import numpy as np

from ..geometry import bev_corners, bev_corners_batch

AREA_EPS = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge ``a -> b``."""
    ex, ey = b - a

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, prev = subject[i], subject[i - 1]
        sc, sp = side(cur), side(prev)
        if sc >= 0:
            if sp < 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            out.append(cur)
        elif sp >= 0:
            out.append(prev + (cur - prev) * (sp / (sp - sc)))
    return out


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` polygon clipped by convex CCW ``clip``."""
    poly = list(np.asarray(subject, dtype=np.float64))
    for i in range(len(clip)):
        if not poly:
            break
        poly = _clip(poly, clip[i], clip[(i + 1) % len(clip)])
    return np.array(poly).reshape(-1, 2)


def bev_intersection(a, b) -> float:
    area = polygon_area(clip_convex(bev_corners(a), bev_corners(b)))
    return area if area > AREA_EPS else 0.0


def iou_bev(a, b) -> float:
    inter = bev_intersection(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a, b) -> float:
    """3D IoU of two oriented boxes, in ``[0, 1]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dz = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# batched path
# ---------------------------------------------------------------------------

def _inside(pts: np.ndarray, quad: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """pts ``(n, k, 2)`` inside CCW quads ``(n, 4, 2)`` (closed, within ``tol`` times each edge length)."""
    a = quad
    b = np.roll(quad, -1, axis=1)
    e = b - a  # (n, 4, 2)
    rel = pts[:, :, None, :] - a[:, None, :, :]  # (n, k, 4, 2)
    cross = e[:, None, :, 0] * rel[..., 1] - e[:, None, :, 1] * rel[..., 0]
    # cross is edge length times signed distance, so scale the slack by length squared
    return np.all(cross >= -tol * np.einsum("nij,nij->ni", e, e)[:, None, :], axis=-1)


def _intersection_area_pairs(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Intersection areas of paired CCW convex quads ``(n, 4, 2)``."""
    n = qa.shape[0]
    if n == 0:
        return np.zeros(0)
    pa, pb = qa, qb
    da = np.roll(qa, -1, axis=1) - qa
    db = np.roll(qb, -1, axis=1) - qb
    # edge i of a vs edge j of b
    p = pa[:, :, None, :]
    r = da[:, :, None, :]
    q = pb[:, None, :, :]
    s = db[:, None, :, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
        ok = (np.abs(denom) > 1e-12) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        cross_pts = (p + t[..., None] * r).reshape(n, 16, 2)
    cross_ok = ok.reshape(n, 16)
    pts = np.concatenate([pa, pb, np.nan_to_num(cross_pts)], axis=1)
    valid = np.concatenate([_inside(pa, qb), _inside(pb, qa), cross_ok], axis=1)
    count = valid.sum(axis=1)
    w = valid.astype(np.float64)
    centroid = (pts * w[..., None]).sum(axis=1) / np.maximum(count, 1)[:, None]
    rel = pts - centroid[:, None, :]
    ang = np.where(valid, np.arctan2(rel[..., 1], rel[..., 0]), np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    srt = np.take_along_axis(pts, order[..., None], axis=1)
    vsrt = np.take_along_axis(valid, order, axis=1)
    first = srt[:, :1, :]
    srt = np.where(vsrt[..., None], srt, first)
    nxt = np.roll(srt, -1, axis=1)
    area = 0.5 * (srt[..., 0] * nxt[..., 1] - srt[..., 1] * nxt[..., 0]).sum(axis=1)
    area = np.where(count >= 3, np.abs(area), 0.0)
    return np.where(area > AREA_EPS, area, 0.0)


def _pairwise(a: np.ndarray, b: np.ndarray, use_height: bool) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    n, m = len(a), len(b)
    out = np.zeros((n, m))
    if n == 0 or m == 0:
        return out
    # circumscribed-circle rejection
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    near = dist < ra[:, None] + rb[None, :]
    if use_height:
        dz = (np.minimum(a[:, None, 2] + a[:, None, 5] / 2, b[None, :, 2] + b[None, :, 5] / 2)
              - np.maximum(a[:, None, 2] - a[:, None, 5] / 2, b[None, :, 2] - b[None, :, 5] / 2))
        near &= dz > 0
    ii, jj = np.nonzero(near)
    if len(ii) == 0:
        return out
    ca, cb = bev_corners_batch(a), bev_corners_batch(b)
    inter = _intersection_area_pairs(ca[ii], cb[jj])
    if use_height:
        inter = inter * dz[ii, jj]
        va, vb = a[:, 3] * a[:, 4] * a[:, 5], b[:, 3] * b[:, 4] * b[:, 5]
    else:
        va, vb = a[:, 3] * a[:, 4], b[:, 3] * b[:, 4]
    union = va[ii] + vb[jj] - inter
    out[ii, jj] = np.clip(inter / union, 0.0, 1.0)
    return out


def iou_3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs 3D IoU, shape ``(len(a), len(b))``."""
    return _pairwise(a, b, use_height=True)


def bev_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs BEV (rotated rectangle) IoU."""
    return _pairwise(a, b, use_height=False)


def nms_bev(boxes: np.ndarray, scores: np.ndarray, threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Equal scores keep the lower index first.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    if max_keep is not None and max_keep <= 0:
        return np.zeros(0, dtype=np.int64)
    ranked = np.asarray(boxes)[order]
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = np.nonzero(~suppressed[i + 1:])[0] + i + 1
        if len(rest):
            suppressed[rest] |= bev_iou_matrix(ranked[i:i + 1], ranked[rest])[0] > threshold
    return np.asarray(keep, dtype=np.int64)
