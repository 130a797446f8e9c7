"""Acceptance criteria, one test and one printed PASS/FAIL line each.

The two training criteria (overfit and ablation) are marked ``slow``; together
they take about half an hour on one core.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from qicvt.harness import check
from qicvt.harness.ablate import ablate
from qicvt.harness.cli import main
from qicvt.harness.config import ExperimentConfig, load_config
from qicvt.harness.model import Detector, run_detection
from qicvt.harness.scenes import generate_scene, scene_rng
from qicvt.harness.train import train
from qicvt.metrics.evaluation import IOU_THRESHOLDS, evaluate
from qicvt.tensor import no_grad

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def test_reversibility(verdict):
    (ok, detail), secs = timed(check.suite_reversibility, cases=200)
    assert verdict("reversibility", ok and secs < 5, f"{detail}; budget 5 s", secs)


def test_identity_at_init(verdict):
    t0 = time.perf_counter()
    (ok_small, detail), _ = timed(check.suite_identity)
    cfg = ExperimentConfig()
    model = Detector(cfg)
    prep = model.prepare(generate_scene(scene_rng(0, "val", 0), cfg))
    with no_grad():
        g_i = model.image(prep.image).data
        g_vi = model.forward(prep).g_vi.data
    err = float(np.max(np.abs(g_vi - g_i)))
    ok = ok_small and err <= 1e-12
    secs = time.perf_counter() - t0
    assert verdict("identity-at-init", ok, f"{detail}; full detector on a scene: {err:.2e} "
                   f"(bit-identical: {np.array_equal(g_vi, g_i)})", secs)


def test_gating_simplex(verdict):
    (ok, detail), secs = timed(check.suite_gating, cases=1000)
    assert verdict("gating-simplex", ok and secs < 2, f"{detail}; budget 2 s", secs)


def test_moe_oracle(verdict):
    (ok, detail), secs = timed(check.suite_moe_oracle, cases=100)
    assert verdict("moe-oracle", ok, detail, secs)


def test_gradients(verdict):
    (ok, detail), secs = timed(check.suite_gradients, cases=10)
    assert verdict("gradients", ok and secs < 60, f"{detail}; budget 60 s", secs)


def test_fps_oracle(verdict):
    (ok, detail), secs = timed(check.suite_fps, cases=100)
    assert verdict("fps-oracle", ok, detail, secs)


def test_metrics_oracle(verdict):
    (ok, detail), secs = timed(check.suite_metrics, cases=50)
    thresholds = IOU_THRESHOLDS == {"VEH": 0.7, "PED": 0.5, "CYC": 0.5}
    assert verdict("metrics-oracle", ok and thresholds,
                   f"{detail}; thresholds VEH/PED/CYC = {IOU_THRESHOLDS['VEH']}/{IOU_THRESHOLDS['PED']}/"
                   f"{IOU_THRESHOLDS['CYC']}", secs)


@pytest.mark.slow
def test_ablation_direction(verdict, tmp_path):
    cfg = load_config(CONFIGS / "ablation.cfg").validate()
    result, secs = timed(ablate, cfg, tmp_path)
    print(result.summary())
    wins = result.wins()
    means = {row: np.mean([result.maph[(row, s)] for s in result.seeds]) for row in ("GAT-only", "SELF-only", "GAT+SELF")}
    detail = (f"GAT+SELF wins on {sum(wins)}/{len(wins)} seeds (needs >= 4); mean mAPH L2 "
              + ", ".join(f"{k} {v:.4f}" for k, v in means.items()) + "; budget 1800 s")
    assert verdict("ablation-direction", result.passed and secs < 1800, detail, secs)


@pytest.mark.slow
def test_overfit(verdict):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "overfit.cfg").validate()
    scenes = [generate_scene(scene_rng(cfg.seed, "train", i), cfg) for i in range(cfg.data.train_scenes)]
    gts = [s.gts for s in scenes]
    before = evaluate(run_detection(Detector(cfg), scenes), gts).mAPH_L2
    res = train(cfg, scenes, steps=2000)
    after = evaluate(run_detection(res.model, scenes), gts).mAPH_L2
    secs = time.perf_counter() - t0
    ok = after >= 0.6 and before < 0.1 and secs < 600
    assert verdict("overfit", ok, f"mAPH L2 untrained {before:.4f} (< 0.1), after 2000 steps {after:.4f} (>= 0.6); "
                   "budget 600 s", secs)


def test_determinism(verdict, tmp_path, capsys):
    t0 = time.perf_counter()
    cfg = tmp_path / "det.cfg"
    cfg.write_text("data.train_scenes = 4\ndata.val_scenes = 4\ntrain.steps = 20\ntrain.log_every = 0\n")
    out = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen-data", "--config", str(cfg), "--seed", "3", "--out", str(d / "data")]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "m.ckpt")]) == 0
        assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data"), "--report", str(d / "rep")]) == 0
        out.append([(d / "rep" / f).read_bytes() for f in ("report.csv", "summary.md", "detections.txt")])
    capsys.readouterr()
    same = out[0] == out[1]
    n_dets = out[0][2].count(b"\n")
    assert verdict("determinism", same, f"gen-data -> train -> eval twice: reports byte-identical: {same} "
                   f"({n_dets} detections)", time.perf_counter() - t0)
