"""AP / APH evaluation with L1/L2 difficulty levels.

Definitions used throughout:

* Heading weight ``1 - |wrap(yaw_det - yaw_gt)| / pi``.
* Greedy matching per scene and class: detections by descending score (stable),
  each takes the unmatched ground truth with the highest IoU (lower index on
  ties) if that IoU reaches the class threshold.
* Matching runs against every ground truth of the class; a detection matched to
  a box outside the evaluated level is dropped from that level's curve.
* Precision at rank ``i`` is ``TP_i / i`` (AP) or ``sum(heading weights)_i / i``
  (APH); recall is ``TP_i / n_gt`` for both. AP is the mean of the precision
  envelope sampled at 101 recall points.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CLASSES, wrap_angle
from .iou import iou_3d_matrix

IOU_THRESHOLDS = {"VEH": 0.7, "PED": 0.5, "CYC": 0.5}
L1_MIN_POINTS = 6
LEVELS = (1, 2)


@dataclass
class GroundTruthBox:
    box: np.ndarray
    cls: str
    num_points: int
    difficulty: int = -1  # 1 = L1, 2 = L2 only, 0 = excluded

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(7)
        if self.difficulty < 0:
            self.difficulty = difficulty_of(self.num_points)


@dataclass
class Detection:
    box: np.ndarray
    cls: str
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(7)
        if not np.isfinite(self.box).all() or not np.isfinite(self.score):
            raise ValueError("detection must be finite")
        self.box[6] = wrap_angle(self.box[6])


@dataclass
class Match:
    det: int
    gt: int  # -1 for a false positive
    iou: float
    heading: float  # 0 for a false positive


def difficulty_of(num_points: int) -> int:
    if num_points >= L1_MIN_POINTS:
        return 1
    return 2 if num_points >= 1 else 0


def difficulty_split(gts: list[GroundTruthBox]) -> list[GroundTruthBox]:
    for g in gts:
        g.difficulty = difficulty_of(g.num_points)
    return gts


def in_level(difficulty: int, level: int) -> bool:
    """L2 is cumulative: it contains every L1 box."""
    return difficulty != 0 and difficulty <= level


def heading_weight(yaw_det: float, yaw_gt: float) -> float:
    return 1.0 - abs(wrap_angle(yaw_det - yaw_gt)) / np.pi


def match_detections(dets: list[Detection], gts: list[GroundTruthBox], iou_threshold: float,
                     iou: np.ndarray | None = None) -> list[Match]:
    """Greedy single-assignment matching; only same-class pairs can match.

    Returns one :class:`Match` per detection in the original detection order.
    """
    if iou is None:
        iou = iou_3d_matrix(np.array([d.box for d in dets]).reshape(-1, 7),
                            np.array([g.box for g in gts]).reshape(-1, 7))
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = np.zeros(len(gts), dtype=bool)
    same = np.array([[d.cls == g.cls for g in gts] for d in dets], dtype=bool).reshape(len(dets), len(gts))
    out: list[Match | None] = [None] * len(dets)
    for i in order:
        cand = np.where(same[i] & ~taken, iou[i], -1.0)
        j = int(np.argmax(cand)) if len(gts) else -1
        if j >= 0 and cand[j] >= iou_threshold:
            taken[j] = True
            out[i] = Match(i, j, float(iou[i, j]), heading_weight(dets[i].box[6], gts[j].box[6]))
        else:
            out[i] = Match(i, -1, float(cand[j]) if j >= 0 and cand[j] > 0 else 0.0, 0.0)
    return out


def pr_curve(scores, tp, heading, n_gt: int, weighted: bool) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each detection in descending-score order."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    credit = np.asarray(heading, dtype=np.float64)[order] if weighted else tp
    rank = np.arange(1, len(order) + 1)
    precision = np.cumsum(credit) / rank
    recall = np.cumsum(tp) / max(n_gt, 1)
    return precision, recall


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, n_points: int = 101) -> float:
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    out = 0.0
    for r in np.linspace(0.0, 1.0, n_points):
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        # recall is non-decreasing; first index with recall >= r
        if idx < len(recall):
            out += envelope[idx]
    return out / n_points


def average_precision(matches, n_gt: int, weighted: bool = False) -> float:
    """AP (or APH when ``weighted``) from ``(score, is_tp, heading_weight)`` triples."""
    matches = list(matches)
    if n_gt == 0:
        return 1.0 if not matches else 0.0
    if not matches:
        return 0.0
    scores, tp, heading = zip(*matches)
    p, r = pr_curve(scores, tp, heading, n_gt, weighted)
    return float(interpolated_ap(p, r))


@dataclass
class EvalReport:
    ap: dict = field(default_factory=dict)  # (class, level) -> AP
    aph: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)
    n_det: dict = field(default_factory=dict)

    @property
    def mAPH_L2(self) -> float:
        return float(np.mean([self.aph[(c, 2)] for c in CLASSES]))

    @property
    def mAP_L2(self) -> float:
        return float(np.mean([self.ap[(c, 2)] for c in CLASSES]))

    def rows(self):
        for c in CLASSES:
            for lvl in LEVELS:
                yield c, f"L{lvl}", self.ap[(c, lvl)], self.aph[(c, lvl)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "difficulty", "AP", "APH"])
        for c, lvl, ap, aph in self.rows():
            w.writerow([c, lvl, f"{ap:.6f}", f"{aph:.6f}"])
        w.writerow(["ALL", "L2", f"{self.mAP_L2:.6f}", f"{self.mAPH_L2:.6f}"])
        return buf.getvalue()

    def summary(self, title: str = "model") -> str:
        head = "| Method | ALL (mAPH) L2 | " + " | ".join(f"{c} L1 AP/APH | {c} L2 AP/APH" for c in CLASSES) + " |"
        cells = []
        for c in CLASSES:
            for lvl in LEVELS:
                cells.append(f"{100 * self.ap[(c, lvl)]:.2f}/{100 * self.aph[(c, lvl)]:.2f}")
        row = f"| {title} | {100 * self.mAPH_L2:.2f} | " + " | ".join(cells) + " |"
        sep = "|" + "---|" * (2 + 2 * len(CLASSES))
        counts = ", ".join(f"{c}: {self.n_gt[(c, 1)]} L1 / {self.n_gt[(c, 2)]} L2 boxes" for c in CLASSES)
        return "\n".join([head, sep, row, "", f"ground truth: {counts}"]) + "\n"


def evaluate(dets_per_scene: list[list[Detection]], gts_per_scene: list[list[GroundTruthBox]],
             thresholds: dict | None = None) -> EvalReport:
    thresholds = dict(IOU_THRESHOLDS if thresholds is None else thresholds)
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError("detections and ground truth cover different scene counts")
    entries = {(c, lvl): [] for c in CLASSES for lvl in LEVELS}
    n_gt = {(c, lvl): 0 for c in CLASSES for lvl in LEVELS}
    for dets, gts in zip(dets_per_scene, gts_per_scene):
        for g in gts:
            if g.cls not in thresholds:
                raise ValueError(f"unknown ground-truth class {g.cls!r}")
        for d in dets:
            if d.cls not in thresholds:
                raise ValueError(f"unknown detection class {d.cls!r}")
        for c in CLASSES:
            cd = [d for d in dets if d.cls == c]
            cg = [g for g in gts if g.cls == c]
            for lvl in LEVELS:
                n_gt[(c, lvl)] += sum(in_level(g.difficulty, lvl) for g in cg)
            if not cd:
                continue
            for m in match_detections(cd, cg, thresholds[c]):
                for lvl in LEVELS:
                    if m.gt >= 0 and not in_level(cg[m.gt].difficulty, lvl):
                        continue
                    entries[(c, lvl)].append((cd[m.det].score, float(m.gt >= 0), m.heading))
    report = EvalReport()
    for key, ms in entries.items():
        report.ap[key] = average_precision(ms, n_gt[key], weighted=False)
        report.aph[key] = average_precision(ms, n_gt[key], weighted=True)
        report.n_gt[key] = n_gt[key]
        report.n_det[key] = len(ms)
    return report


def write_detections(path, dets_per_scene: list[list[Detection]], scene_ids: list[str] | None = None):
    """Text lines ``scene_id class score cx cy cz l w h yaw``."""
    with open(path, "w") as f:
        for i, dets in enumerate(dets_per_scene):
            sid = scene_ids[i] if scene_ids else str(i)
            for d in dets:
                vals = " ".join(repr(float(v)) for v in d.box)
                f.write(f"{sid} {d.cls} {float(d.score)!r} {vals}\n")


def read_detections(path, scene_ids: list[str]) -> list[list[Detection]]:
    index = {s: i for i, s in enumerate(scene_ids)}
    out: list[list[Detection]] = [[] for _ in scene_ids]
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 10:
                raise ValueError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            sid, cls = parts[0], parts[1]
            if sid not in index:
                raise ValueError(f"{path}:{lineno}: unknown scene {sid!r}")
            if cls not in CLASSES:
                raise ValueError(f"{path}:{lineno}: unknown class {cls!r}")
            vals = [float(v) for v in parts[2:]]
            out[index[sid]].append(Detection(np.array(vals[1:]), cls, vals[0]))
    return out
