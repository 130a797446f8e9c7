from .evaluation import (IOU_THRESHOLDS, Detection, EvalReport, GroundTruthBox, Match, average_precision,
                         difficulty_of, difficulty_split, evaluate, heading_weight, interpolated_ap,
                         match_detections, pr_curve, read_detections, write_detections)
from .iou import bev_iou_matrix, clip_convex, iou_3d, iou_3d_matrix, iou_bev, nms_bev, polygon_area
