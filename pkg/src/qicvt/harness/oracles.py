"""Slow, direct reference implementations used to cross-check the fast paths."""
from __future__ import annotations

import math

import numpy as np

from ..geometry import CLASSES
from ..metrics.iou import iou_3d


def _sq(a, b) -> float:
    dx, dy, dz = float(a[0]) - float(b[0]), float(a[1]) - float(b[1]), float(a[2]) - float(b[2])
    return dx * dx + dy * dy + dz * dz


def fps_bruteforce(xyz: np.ndarray, k: int, seed_index: int = 0) -> list[int]:
    """Max-min selection, recomputing every distance from scratch at each step."""
    n = len(xyz)
    if k >= n:
        return list(range(n))
    chosen = [seed_index]
    while len(chosen) < k:
        best, best_d = -1, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(_sq(xyz[i], xyz[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def dense_moe(x: np.ndarray, logits: np.ndarray, k: int, experts) -> np.ndarray:
    """Every expert on every row, mixed by a per-row top-k softmax (ties to the lower index)."""
    outs = np.stack([e(x) for e in experts], axis=1)  # (P, N, D)
    y = np.zeros((x.shape[0], outs.shape[2]))
    for r in range(x.shape[0]):
        order = sorted(range(logits.shape[1]), key=lambda i: (-logits[r, i], i))[:k]
        z = np.array([logits[r, i] for i in order])
        w = np.exp(z - z.max())
        w /= w.sum()
        for wi, i in zip(w, order):
            y[r] += wi * outs[r, i]
    return y


def greedy_match(dets, gts, threshold: float):
    """Per detection in descending score order: matched GT index or -1, and heading weight."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    used = set()
    res = {}
    for i in order:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if j in used or g[1] != dets[i][1]:
                continue
            v = iou_3d(dets[i][0], g[0])
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= threshold:
            used.add(best)
            d = (dets[i][0][6] - gts[best][0][6] + math.pi) % (2 * math.pi) - math.pi
            res[i] = (best, 1.0 - abs(d) / math.pi)
        else:
            res[i] = (-1, 0.0)
    return res


def ap_bruteforce(entries: list[tuple[float, bool, float]], n_gt: int, weighted: bool) -> float:
    """101-point AP: for each recall level, the best precision over every prefix reaching it."""
    if n_gt == 0:
        return 1.0 if not entries else 0.0
    ranked = sorted(entries, key=lambda e: -e[0])
    prefixes = []
    tp = credit = 0.0
    for rank, (_, is_tp, h) in enumerate(ranked, 1):
        tp += is_tp
        credit += h if weighted else is_tp
        prefixes.append((tp / n_gt, credit / rank))
    total = 0.0
    for i in range(101):
        r = i / 100
        total += max([p for rec, p in prefixes if rec >= r - 1e-12], default=0.0)
    return total / 101


def evaluate_bruteforce(scenes, thresholds: dict, min_l1_points: int = 6) -> dict:
    """``scenes``: list of (dets, gts) with dets ``(box, cls, score)`` and gts ``(box, cls, n_points)``.

    Returns ``{(cls, level): (AP, APH)}``.
    """
    out = {}
    for c in CLASSES:
        for level in (1, 2):
            entries, n_gt = [], 0
            for dets, gts in scenes:
                cd = [d for d in dets if d[1] == c]
                cg = [g for g in gts if g[1] == c]

                def in_level(g):
                    return g[2] >= min_l1_points if level == 1 else g[2] >= 1

                n_gt += sum(in_level(g) for g in cg)
                for i, (j, h) in greedy_match(cd, cg, thresholds[c]).items():
                    if j >= 0 and not in_level(cg[j]):
                        continue
                    entries.append((cd[i][2], j >= 0, h))
            out[(c, level)] = (ap_bruteforce(entries, n_gt, False), ap_bruteforce(entries, n_gt, True))
    return out


def count_inside(points: np.ndarray, box) -> int:
    """Point-by-point containment in the box frame."""
    cx, cy, cz, l, w, h, yaw = (float(v) for v in box)
    c, s = math.cos(yaw), math.sin(yaw)
    n = 0
    for x, y, z in points[:, :3]:
        dx, dy = x - cx, y - cy
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        if abs(lx) <= l / 2 and abs(ly) <= w / 2 and abs(z - cz) <= h / 2:
            n += 1
    return n
