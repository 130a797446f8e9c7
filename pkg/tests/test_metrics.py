"""IoU, matching, AP/APH and the evaluation report against exhaustive oracles."""
import math

import numpy as np
import pytest
import shapely
from hypothesis import example, given, settings
from hypothesis import strategies as st

from qicvt.geometry import CLASSES, bev_corners
from qicvt.harness import oracles
from qicvt.harness.check import random_fixture
from qicvt.metrics.evaluation import (
    IOU_THRESHOLDS, Detection, GroundTruthBox, average_precision, difficulty_split, evaluate, heading_weight,
    in_level, match_detections, read_detections, write_detections,
)
from qicvt.metrics.iou import bev_iou_matrix, clip_convex, iou_3d, iou_3d_matrix, iou_bev, nms_bev, polygon_area

box_st = st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1), st.floats(0.1, 4), st.floats(0.1, 4),
                   st.floats(0.1, 3), st.floats(-math.pi, math.pi)).map(np.array)


def shapely_iou_3d(a, b):
    inter = shapely.Polygon(bev_corners(a)).intersection(shapely.Polygon(bev_corners(b))).area
    dz = max(0.0, min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2))
    v = inter * dz
    return v / (np.prod(a[3:6]) + np.prod(b[3:6]) - v)


def test_iou_examples():
    a = np.array([0, 0, 0, 1, 1, 1, 0.0])
    assert iou_3d(a, a) == pytest.approx(1.0)
    assert iou_3d(a, a + [5, 0, 0, 0, 0, 0, 0]) == 0.0
    assert iou_3d(a, a + [0.5, 0, 0, 0, 0, 0, 0]) == pytest.approx(1 / 3)
    assert iou_bev(a, a + [0, 0, 7, 0, 0, 0, 0]) == pytest.approx(1.0)
    assert iou_3d(a, a + [0, 0, 0, 0, 0, 0, np.pi / 2]) == pytest.approx(1.0)


NEAR_PARALLEL = (np.array([0.0, 6e-8, 0.0, 0.25, 1.0, 1.0, 6e-8]), np.array([0.0, 6e-8, 0.0, 0.125, 1.0, 1.0, 0.0]))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
@example(*NEAR_PARALLEL)  # corners a few nm outside a nearly parallel edge
def test_iou_matches_polygon_library(a, b):
    assert iou_3d(a, b) == pytest.approx(shapely_iou_3d(a, b), abs=1e-9)
    assert iou_3d_matrix(a[None], b[None])[0, 0] == pytest.approx(iou_3d(a, b), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(box_st, min_size=1, max_size=5), st.lists(box_st, min_size=1, max_size=5))
def test_iou_matrix_entries(a, b):
    a, b = np.array(a), np.array(b)
    m = bev_iou_matrix(a, b)
    for i in range(len(a)):
        for j in range(len(b)):
            assert m[i, j] == pytest.approx(iou_bev(a[i], b[j]), abs=1e-9)


def test_clip_and_area():
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    assert polygon_area(sq) == pytest.approx(4.0)
    assert polygon_area(clip_convex(sq, sq + 1)) == pytest.approx(1.0)
    assert polygon_area(clip_convex(sq, sq + 5)) == 0.0


def test_nms_greedy_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        boxes = np.column_stack([rng.uniform(-3, 3, (12, 2)), np.zeros(12), rng.uniform(0.5, 3, (12, 3)),
                                 rng.uniform(-3, 3, 12)])
        scores = rng.random(12)
        keep, alive = [], list(np.argsort(-scores, kind="stable"))
        while alive:
            i = alive.pop(0)
            keep.append(i)
            alive = [j for j in alive if iou_bev(boxes[i], boxes[j]) <= 0.3]
        assert list(nms_bev(boxes, scores, 0.3)) == keep
        assert list(nms_bev(boxes, scores, 0.3, max_keep=2)) == keep[:2]


def test_heading_weight_examples():
    assert heading_weight(0.3, 0.3) == 1.0
    assert heading_weight(np.pi, 0.0) == pytest.approx(0.0)
    assert heading_weight(np.pi / 2, 0.0) == pytest.approx(0.5)
    assert heading_weight(3.0, -3.0) == pytest.approx(1 - (2 * np.pi - 6) / np.pi)


def _gt(x, cls="VEH", n=10, yaw=0.0):
    return GroundTruthBox(np.array([x, 0, 0, 4, 2, 1.5, yaw]), cls, n)


def _det(x, score, cls="VEH", yaw=0.0):
    return Detection(np.array([x, 0, 0, 4, 2, 1.5, yaw]), cls, score)


def test_match_examples():
    m = match_detections([_det(0, 0.9)], [_gt(0)], 0.7)
    assert m[0].gt == 0 and m[0].heading == 1.0
    m = match_detections([_det(0.1, 0.5), _det(0.0, 0.9)], [_gt(0)], 0.7)
    assert m[1].gt == 0 and m[0].gt == -1
    assert match_detections([_det(0, 0.9, "PED")], [_gt(0)], 0.5)[0].gt == -1


def test_match_mixed_vs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        dets, gts = random_fixture(rng)
        if not dets:
            continue
        got = match_detections([Detection(*d) for d in dets], [GroundTruthBox(*g) for g in gts], 0.5)
        want = oracles.greedy_match(dets, gts, 0.5)
        for m in got:
            assert want[m.det][0] == m.gt
            assert want[m.det][1] == pytest.approx(m.heading)


def test_ap_examples():
    assert average_precision([(0.9, 1.0, 1.0)], 1) == pytest.approx(1.0)
    assert average_precision([(0.9, 1.0, 1.0), (0.5, 0.0, 0.0)], 1) == pytest.approx(1.0)
    assert average_precision([(0.9, 0.0, 0.0), (0.5, 1.0, 1.0)], 1) == pytest.approx(0.5)
    assert average_precision([(0.9, 1.0, 0.5)], 1, weighted=True) == pytest.approx(0.5)
    assert average_precision([(0.9, 1.0, 0.5)], 1) == pytest.approx(1.0)
    assert average_precision([], 3) == 0.0


def test_difficulty_rules():
    gts = difficulty_split([_gt(0, n=10), _gt(0, n=3), _gt(0, n=0)])
    assert [g.difficulty for g in gts] == [1, 2, 0]
    assert in_level(1, 1) and in_level(1, 2) and in_level(2, 2) and not in_level(2, 1)
    assert not in_level(0, 1) and not in_level(0, 2)


def test_evaluate_perfect_and_empty():
    gts = [[_gt(0, c) for c in CLASSES] + [_gt(10, "PED", n=2)]]
    dets = [[Detection(g.box, g.cls, 1.0) for g in gts[0]]]
    rep = evaluate(dets, gts)
    assert all(v == pytest.approx(1.0) for v in rep.ap.values())
    assert all(v == pytest.approx(1.0) for v in rep.aph.values())
    assert rep.mAPH_L2 == pytest.approx(1.0)
    rep = evaluate([[]], gts)
    assert rep.mAPH_L2 == 0.0 and all(v == 0.0 for v in rep.ap.values())


def test_evaluate_thresholds_per_class():
    # a 0.6 IoU detection counts for PED and CYC (0.5) but not VEH (0.7)
    assert IOU_THRESHOLDS == {"VEH": 0.7, "PED": 0.5, "CYC": 0.5}
    shift = 4 * (1 - 0.6) / (1 + 0.6)  # length-4 boxes offset along x: IoU = (4 - s) / (4 + s)
    for cls, want in (("VEH", 0.0), ("PED", 1.0), ("CYC", 1.0)):
        rep = evaluate([[_det(shift, 0.9, cls)]], [[_gt(0, cls)]])
        assert rep.ap[(cls, 1)] == pytest.approx(want)


def test_evaluate_fixture_vs_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scenes = [random_fixture(rng) for _ in range(int(rng.integers(1, 3)))]
        rep = evaluate([[Detection(*d) for d in ds] for ds, _ in scenes],
                       [[GroundTruthBox(*g) for g in gs] for _, gs in scenes])
        for key, (ap, aph) in oracles.evaluate_bruteforce(scenes, IOU_THRESHOLDS).items():
            assert rep.ap[key] == pytest.approx(ap, abs=1e-12)
            assert rep.aph[key] == pytest.approx(aph, abs=1e-12)
            assert rep.aph[key] <= rep.ap[key] + 1e-12
            assert 0.0 <= rep.aph[key] <= 1.0


def test_report_emission_and_detection_file(tmp_path):
    rep = evaluate([[_det(0, 0.8)]], [[_gt(0)]])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "class,difficulty,AP,APH" and lines[-1].startswith("ALL,L2,")
    assert len(lines) == 2 + 2 * len(CLASSES)
    assert "ALL (mAPH)" in rep.summary()
    dets = [[_det(1.5, 0.25, yaw=0.3)], [], [_det(-2, 0.5, "CYC")]]
    path = tmp_path / "dets.txt"
    write_detections(path, dets, ["a", "b", "c"])
    back = read_detections(path, ["a", "b", "c"])
    assert [len(d) for d in back] == [1, 0, 1]
    assert np.array_equal(back[0][0].box, dets[0][0].box) and back[2][0].cls == "CYC"
    path.write_text("a VEH 0.5 1 2\n")
    with pytest.raises(ValueError):
        read_detections(path, ["a"])
