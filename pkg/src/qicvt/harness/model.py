"""The full two-stage detector assembled from the library modules, plus its training losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..frontend import (Backbone, ImageEncoder, RoIPool, RPNHead, cell_statistics, decode_boxes, encode_boxes, fps,
                        roi_point_features, select_proposals, voxelize)
from ..frontend.pointcloud import FeatureVolume
from ..frontend.roi import N_POINT_FEATURES
from ..gat import GAT, image_voxel_sqdist
from ..geometry import CLASSES, points_in_boxes, wrap_angle
from ..metrics.evaluation import Detection
from ..metrics.iou import bev_iou_matrix, iou_3d_matrix, nms_bev
from ..moe import SELF, ConcatFusion, DetectHead, decode_outputs, encode_refinement, gather_image_context
from ..nn import Module, param
from ..tensor import Tensor, no_grad
from .config import ExperimentConfig
from .scenes import SyntheticScene, calibration_for

SECTIONS = ("image", "backbone", "rpn", "roi", "gat", "self", "head")
RPN_STAGE = 2  # stride-4 volume feeds the proposal head and the global fusion
RPN_POS_IOU, RPN_NEG_IOU = 0.5, 0.25
HEAD_POS_IOU = 0.3
CONF_LO, CONF_HI = 0.25, 0.75  # confidence target ramps over the refined box's 3D IoU
FOCAL_ALPHA, FOCAL_GAMMA = 0.25, 2.0


class Fusion(Module):
    """Local fusion stage: SELF or its dense substitute, plus the empty-context vector."""

    def __init__(self, rng: np.random.Generator, cfg: ExperimentConfig, d_lidar: int, d_image: int):
        s = cfg.self
        self.empty_context = param(np.zeros(d_image))
        if s.on:
            self.net = SELF(rng, d_lidar, d_image, s.experts.dim, s.experts.hidden, s.channels,
                            s.experts.n, s.experts.k, s.gate.noise, s.gate.formula, s.gate.balance)
        else:
            target = _self_param_count(cfg, d_lidar, d_image)
            hidden = max(1, int(round((target - s.channels) / (d_lidar + d_image + 1 + s.channels))))
            self.net = ConcatFusion(rng, d_lidar, d_image, hidden, s.channels)

    def __call__(self, g_l, g_i, rng=None, train_mode=False):
        return self.net(g_l, g_i, rng=rng, train_mode=train_mode)


def _self_param_count(cfg: ExperimentConfig, d_lidar: int, d_image: int) -> int:
    s = cfg.self
    return SELF(np.random.default_rng(0), d_lidar, d_image, s.experts.dim, s.experts.hidden, s.channels,
                s.experts.n, s.experts.k, s.gate.noise, s.gate.formula).num_parameters()


@dataclass
class PreparedScene:
    """Per-scene inputs that do not depend on the parameters."""

    points: np.ndarray
    volume: FeatureVolume
    image: Tensor
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    rpn_labels: np.ndarray  # 1 positive, 0 negative, -1 ignored
    rpn_targets: np.ndarray  # (n_pos, 8)
    keypoints: np.ndarray | None
    cell_stats: np.ndarray | None


@dataclass
class ForwardResult:
    proposals: np.ndarray
    rpn_logits: Tensor
    rpn_reg: Tensor
    class_logits: Tensor
    confidence: Tensor
    residuals: Tensor
    aux_loss: Tensor | None
    g_vi: Tensor


def assign_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, cell: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Anchor labels (1 positive, 0 negative, -1 ignored) and regression targets.

    Positives: BEV IoU >= 0.5, plus for each box the anchor of the cell holding
    its center whose shape fits best (IoU with the anchor moved onto the box
    center). Anchors with IoU below 0.25 are negatives, except those in a center
    cell whose shape fit is at least 0.25, which are ignored.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    assigned = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return labels, np.zeros((0, 8))
    iou = bev_iou_matrix(anchors, gt_boxes)
    best = iou.argmax(axis=1)
    best_iou = iou.max(axis=1)
    labels[(best_iou >= RPN_NEG_IOU)] = -1
    pos = best_iou >= RPN_POS_IOU
    labels[pos] = 1
    assigned[pos] = best[pos]
    per_cell = n // (cell[2] * cell[3])
    for j, b in enumerate(gt_boxes):
        iu = int(np.floor((b[0] - cell[0]) / cell[4]))
        iv = int(np.floor((b[1] - cell[1]) / cell[5]))
        if not (0 <= iu < cell[2] and 0 <= iv < cell[3]):
            continue
        base = (iu * cell[3] + iv) * per_cell
        cand = np.arange(base, base + per_cell)
        moved = anchors[cand].copy()
        moved[:, :2] = b[:2]
        fit = bev_iou_matrix(moved, b[None])[:, 0]
        for a in cand[np.argsort(-fit, kind="stable")]:
            if assigned[a] < 0:
                labels[a] = 1
                assigned[a] = j
                break
        for a, f in zip(cand, fit):
            if labels[a] == 0 and f >= RPN_NEG_IOU:
                labels[a] = -1
    idx = np.nonzero(labels == 1)[0]
    return labels, encode_boxes(anchors[idx], gt_boxes[assigned[idx]])


class Detector(Module):
    def __init__(self, cfg: ExperimentConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([int(cfg.seed if seed is None else seed), 1])
        streams = rng.spawn(len(SECTIONS))
        r = dict(zip(SECTIONS, streams))
        self.spec = cfg.grid.spec()
        self.calib = calibration_for(cfg)
        widths = tuple(cfg.backbone.widths)
        c_i = cfg.image.channels
        self.image = ImageEncoder(r["image"], c_i, cfg.image.hidden)
        self.backbone = Backbone(r["backbone"], widths)
        stage_spec = self.spec.coarsen(4)
        self.rpn = RPNHead(r["rpn"], widths[RPN_STAGE] * stage_spec.extents[2], cfg.rpn.hidden,
                           anchor_sizes=cfg.rpn.anchor_sizes, cell_stats=cfg.rpn.cell_stats)
        self.extra_dim = N_POINT_FEATURES + (1 if cfg.self.keypoints > 0 else 0)
        self.roi = RoIPool(r["roi"], widths, cfg.roi.channels, self.extra_dim)
        g = cfg.gat
        self.gat = GAT(r["gat"], c_i, widths[RPN_STAGE], g.voxel_dim, g.depth, g.heads, g.n_global,
                       g.align_dim, g.zero_init, g.recompute) if g.on else None
        self.fusion = Fusion(r["self"], cfg, cfg.roi.channels, c_i)
        head_in = cfg.self.channels + (self.extra_dim if cfg.head.descriptor else 0)
        self.head = DetectHead(r["head"], head_in, cfg.head.hidden)
        self.anchors = self.rpn.anchors(stage_spec)
        self.cell = (stage_spec.origin[0], stage_spec.origin[1], stage_spec.extents[0], stage_spec.extents[1],
                     stage_spec.voxel_size[0], stage_spec.voxel_size[1])
        grid_hw = (cfg.image.height // 4, cfg.image.width // 4)
        self.sqdist = image_voxel_sqdist(self.calib, grid_hw, stage_spec)

    def sections(self) -> dict[str, Module | None]:
        return {"image": self.image, "backbone": self.backbone, "rpn": self.rpn, "roi": self.roi,
                "gat": self.gat, "self": self.fusion, "head": self.head}

    def named_parameters(self, prefix: str = ""):
        for name, mod in self.sections().items():
            if mod is not None:
                yield from mod.named_parameters(f"{prefix}{name}.")

    def parameter_counts(self) -> dict[str, int]:
        return {k: (m.num_parameters() if m is not None else 0) for k, m in self.sections().items()}

    # -- inputs -----------------------------------------------------------

    def prepare(self, scene: SyntheticScene) -> PreparedScene:
        volume = voxelize(scene.cloud, self.spec)
        labels, targets = assign_anchors(self.anchors, scene.boxes, self.cell)
        kp = None
        if self.cfg.self.keypoints > 0:
            kp = scene.cloud.xyz[fps(scene.cloud, self.cfg.self.keypoints).indices]
        stats = cell_statistics(scene.cloud.points, self.spec, 4) if self.cfg.rpn.cell_stats else None
        return PreparedScene(scene.cloud.points, volume, Tensor(scene.image), scene.boxes, scene.classes,
                             labels, targets, kp, stats)

    def jitter_boxes(self, boxes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = self.cfg.rpn.gt_jitter
        if n <= 0 or len(boxes) == 0:
            return np.zeros((0, 7))
        b = np.repeat(boxes, n, axis=0)
        diag = np.hypot(b[:, 3], b[:, 4])
        out = b.copy()
        out[:, :2] += rng.normal(size=(len(b), 2)) * (0.1 * diag + 0.1)[:, None]
        out[:, 2] += rng.normal(0, 0.1, size=len(b))
        out[:, 3:6] *= np.exp(rng.normal(0, 0.1, size=(len(b), 3)))
        flip = rng.random(len(b)) < 0.5  # RPN orientation is only known modulo pi
        out[:, 6] = wrap_angle(out[:, 6] + rng.normal(0, 0.2, size=len(b)) + np.pi * flip)
        return out

    def roi_extra(self, prep: PreparedScene, boxes: np.ndarray) -> np.ndarray:
        extra = roi_point_features(prep.points, boxes, self.cfg.roi.margin)
        if prep.keypoints is not None:
            n_kp = points_in_boxes(prep.keypoints, boxes, self.cfg.roi.margin).sum(axis=1)
            extra = np.column_stack([extra, np.log1p(n_kp)])
        return extra

    # -- forward ------------------------------------------------------------

    def forward(self, prep: PreparedScene, rng: np.random.Generator | None = None, train: bool = False,
                n_proposals: int | None = None) -> ForwardResult:
        cfg = self.cfg
        g_i = self.image(prep.image)
        vols = self.backbone(prep.volume)
        rpn_logits, rpn_reg = self.rpn(vols[RPN_STAGE], prep.cell_stats)
        boxes = decode_boxes(self.anchors, rpn_reg.data)
        scores = 1.0 / (1.0 + np.exp(-rpn_logits.data))
        if n_proposals is None:
            n_proposals = cfg.rpn.train_proposals if train else cfg.rpn.eval_proposals
        props = select_proposals(boxes, scores, n_proposals, cfg.rpn.nms)
        proposals = np.array([p.box for p in props]).reshape(-1, 7)
        if train:
            proposals = np.concatenate([proposals, self.jitter_boxes(prep.gt_boxes, rng)])
        pool_boxes = proposals.copy()
        pool_boxes[:, 3:6] += 2 * cfg.roi.margin
        extra = self.roi_extra(prep, proposals)
        g_l = self.roi(vols, pool_boxes, extra)
        g_vi = self.gat(g_i, vols[RPN_STAGE], self.sqdist) if self.gat is not None else g_i
        source = g_vi if cfg.self.context.source == "gvi" else g_i
        g_ctx = gather_image_context(proposals, source, self.calib, self.fusion.empty_context)
        fused = self.fusion(g_l, g_ctx, rng=rng if train else None, train_mode=train)
        head_in = T.concat([fused.y, Tensor(extra)], axis=1) if cfg.head.descriptor else fused.y
        cls, conf, reg = self.head(head_in)
        return ForwardResult(proposals, rpn_logits, rpn_reg, cls, conf, reg, fused.aux_loss, g_vi)

    def detect(self, prep: PreparedScene) -> list[Detection]:
        cfg = self.cfg
        with no_grad():
            out = self.forward(prep, train=False)
        if len(out.proposals) == 0:
            return []
        dec = decode_outputs(out.proposals, out.class_logits.data, out.confidence.data, out.residuals.data)
        logits = dec.class_logits - dec.class_logits.max(axis=1, keepdims=True)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        cls = probs.argmax(axis=1)
        score = dec.confidence * probs.max(axis=1)
        boxes = dec.boxes
        ok = np.all(np.isfinite(boxes), axis=1) & (score >= cfg.eval.min_score)
        keep = []
        for c in range(len(CLASSES)):
            idx = np.nonzero(ok & (cls == c))[0]
            keep.extend(idx[nms_bev(boxes[idx], score[idx], cfg.eval.nms)])
        keep = sorted(keep, key=lambda i: (-score[i], i))[:cfg.eval.max_detections]
        return [Detection(boxes[i], CLASSES[cls[i]], float(score[i])) for i in keep]

    # -- losses -------------------------------------------------------------

    def loss(self, prep: PreparedScene, out: ForwardResult) -> tuple[Tensor, dict[str, float]]:
        parts = {}
        labels = prep.rpn_labels
        n_pos = max(1, int((labels == 1).sum()))
        valid = labels >= 0
        x = T.gather_rows(out.rpn_logits.reshape(-1, 1), np.nonzero(valid)[0]).reshape(-1)
        y = (labels[valid] == 1).astype(np.float64)
        parts["rpn_cls"] = focal_loss(x, y) * (1.0 / n_pos)
        pos = np.nonzero(labels == 1)[0]
        if len(pos):
            reg = T.gather_rows(out.rpn_reg, pos)
            parts["rpn_reg"] = T.smooth_l1(reg, prep.rpn_targets, beta=1.0 / 9).sum() * (2.0 / n_pos)
        props = out.proposals
        if len(props) and len(prep.gt_boxes):
            iou = bev_iou_matrix(props, prep.gt_boxes)
            j = iou.argmax(axis=1)
            best = iou.max(axis=1)
        else:
            j = np.zeros(len(props), dtype=np.int64)
            best = np.zeros(len(props))
        refined_iou = np.zeros(len(props))
        if len(props) and len(prep.gt_boxes):
            refined = decode_outputs(props, out.class_logits.data, out.confidence.data, out.residuals.data).boxes
            refined_iou = iou_3d_matrix(refined, prep.gt_boxes).max(axis=1)
        conf_t = np.clip((refined_iou - CONF_LO) / (CONF_HI - CONF_LO), 0.0, 1.0)
        parts["conf"] = bce_with_logits(out.confidence, conf_t).mean()
        hp = np.nonzero(best >= HEAD_POS_IOU)[0]
        if len(hp):
            onehot = np.zeros((len(hp), len(CLASSES)))
            onehot[np.arange(len(hp)), prep.gt_classes[j[hp]]] = 1.0
            logp = T.log_softmax(T.gather_rows(out.class_logits, hp), axis=1)
            parts["cls"] = -(logp * Tensor(onehot)).sum() * (1.0 / len(hp))
            target = encode_refinement(props[hp], prep.gt_boxes[j[hp]])
            reg = T.gather_rows(out.residuals, hp)
            parts["reg"] = T.smooth_l1(reg, target, beta=0.1).sum() * (2.0 / len(hp))
        if out.aux_loss is not None:
            parts["balance"] = out.aux_loss
        total = None
        for v in parts.values():
            total = v if total is None else total + v
        return total, {k: float(v.data) for k, v in parts.items()}


def focal_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed binary focal loss."""
    p = T.sigmoid(logits)
    y = Tensor(targets)
    pos = y * FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * T.softplus(-logits)
    neg = (1.0 - y) * (1.0 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * T.softplus(logits)
    return (pos + neg).sum()


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    y = Tensor(targets)
    return y * T.softplus(-logits) + (1.0 - y) * T.softplus(logits)


def run_detection(model: Detector, scenes: list[SyntheticScene]) -> list[list[Detection]]:
    return [model.detect(model.prepare(s)) for s in scenes]
