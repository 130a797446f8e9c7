"""Config, scenes, checkpoints, training and the command line."""
import hashlib
import json

import numpy as np
import pytest

from qicvt.harness.ablate import ROWS, parameter_counts
from qicvt.harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from qicvt.harness.cli import main
from qicvt.harness.config import ConfigError, ExperimentConfig, load_config, parse_config, to_text
from qicvt.harness.model import Detector, run_detection
from qicvt.harness.oracles import count_inside
from qicvt.harness.scenes import (
    calibration_for, gen_scenes, generate_scene, mirror_scene, read_scene, scene_rng, write_scene,
)
from qicvt.harness.train import train
from qicvt.metrics.evaluation import evaluate

# small enough that every harness test runs in seconds
TINY = """
data.train_scenes = 2
data.val_scenes = 2
backbone.widths = (4, 8, 8, 8)
rpn.hidden = 8
roi.channels = 8
gat.depth = 1
gat.voxel_dim = 8
gat.align_dim = 8
self.experts.dim = 8
self.experts.hidden = 8
self.channels = 8
head.hidden = 8
train.steps = 3
train.log_every = 0
ablate.seeds = (0,)
ablate.steps = 2
"""


@pytest.fixture(scope="module")
def tiny():
    return parse_config(TINY).validate()


def test_config_round_trip_and_errors():
    cfg = parse_config("gat.depth = 3  # comment\nself.gate.formula = literal\ntrain.mirror = off\n")
    assert cfg.gat.depth == 3 and cfg.self.gate.formula == "literal" and cfg.train.mirror is False
    assert to_text(parse_config(to_text(cfg))) == to_text(cfg)
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("gat.nope = 1")
    with pytest.raises(ConfigError):
        parse_config("gat.depth = two")
    with pytest.raises(ConfigError):
        parse_config("gat.depth 2")
    with pytest.raises(ConfigError, match="multiples of 8"):
        parse_config("grid.extents = (16, 16, 12)").validate()
    with pytest.raises(ConfigError):
        parse_config("self.experts.k = 5").validate()


def test_shipped_configs_parse():
    from pathlib import Path
    cfgs = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))
    assert cfgs
    for p in cfgs:
        load_config(p).validate()


def test_scene_determinism_and_file_round_trip(tmp_path):
    cfg = ExperimentConfig()
    a = generate_scene(scene_rng(3, "train", 1), cfg)
    b = generate_scene(scene_rng(3, "train", 1), cfg)
    assert np.array_equal(a.cloud.points, b.cloud.points) and np.array_equal(a.image, b.image)
    write_scene(tmp_path / "s.qicv", a)
    back = read_scene(tmp_path / "s.qicv", calibration_for(cfg))
    assert np.array_equal(back.cloud.points, a.cloud.points.astype(np.float32))
    for g, h in zip(a.gts, back.gts):
        assert g.cls == h.cls and g.num_points == h.num_points
        assert g.num_points == count_inside(back.cloud.points, h.box)
    (tmp_path / "bad.qicv").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        read_scene(tmp_path / "bad.qicv", calibration_for(cfg))


def test_density_falls_with_range():
    """Same box at 4 m and 18 m: far copies get fewer returns on average over 100 scenes."""
    from qicvt.harness.scenes import surface_points
    cfg = ExperimentConfig()
    near, far = [], []
    for i in range(100):
        rng = np.random.default_rng(i)
        near.append(len(surface_points(rng, np.array([4.0, 0, 0.8, 4.5, 1.9, 1.6, 0.3]), cfg.data.point_density)))
        far.append(len(surface_points(rng, np.array([18.0, 0, 0.8, 4.5, 1.9, 1.6, 0.3]), cfg.data.point_density)))
    assert np.mean(far) < np.mean(near)


def test_mirror_scene_is_an_involution():
    s = generate_scene(scene_rng(0, "val", 0), ExperimentConfig())
    m = mirror_scene(mirror_scene(s))
    assert np.array_equal(m.cloud.points, s.cloud.points) and np.array_equal(m.image, s.image)
    assert all(np.array_equal(g.box, h.box) for g, h in zip(m.gts, s.gts))


def test_gen_data_checksums_repeat(tmp_path, tiny):
    a = gen_scenes(tiny, 7, tmp_path / "a")
    b = gen_scenes(tiny, 7, tmp_path / "b")
    assert a == b and len(a["files"]) == 4
    c = gen_scenes(tiny, 8, tmp_path / "c")
    assert c["files"] != a["files"]


def test_checkpoint_round_trip(tmp_path, tiny):
    model = Detector(tiny)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    a, b = model.state_dict(), back.state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    scenes = [generate_scene(scene_rng(0, "val", i), tiny) for i in range(2)]
    ra = evaluate(run_detection(model, scenes), [s.gts for s in scenes])
    rb = evaluate(run_detection(back, scenes), [s.gts for s in scenes])
    assert ra.to_csv() == rb.to_csv()
    (tmp_path / "x.ckpt").write_bytes(b"JUNK")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_train_zero_steps_is_init_and_runs_repeat(tiny):
    scenes = [generate_scene(scene_rng(0, "train", i), tiny) for i in range(2)]
    init = Detector(tiny).state_dict()
    zero = train(tiny, scenes, steps=0).model.state_dict()
    assert all(np.array_equal(init[k], zero[k]) for k in init)
    a = train(tiny, scenes, steps=3)
    b = train(tiny, scenes, steps=3)
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert [r["loss"] for r in a.losses] == [r["loss"] for r in b.losses]


@pytest.mark.slow
def test_loss_drops_by_step_200():
    cfg = ExperimentConfig()
    scenes = [generate_scene(scene_rng(0, "train", i), cfg) for i in range(16)]
    losses = [r["loss"] for r in train(cfg, scenes, steps=200).losses]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_component_toggles_change_parameter_count(tiny):
    counts = parameter_counts(tiny)
    assert set(counts) == set(ROWS) and len(set(counts.values())) == 3


def test_untrained_report_in_unit_range(tiny):
    scenes = [generate_scene(scene_rng(1, "val", i), tiny) for i in range(2)]
    rep = evaluate(run_detection(Detector(tiny), scenes), [s.gts for s in scenes])
    assert all(0.0 <= v <= 1.0 for v in list(rep.ap.values()) + list(rep.aph.values()))


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_cli_pipeline_is_byte_reproducible(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    reports = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        assert main(["gen-data", "--config", str(cfg), "--seed", "5", "--out", str(d / "data")]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "m.ckpt")]) == 0
        assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data"), "--report", str(d / "rep")]) == 0
        reports.append(d)
    for name in ("rep/report.csv", "rep/summary.md", "rep/detections.txt", "m.ckpt", "m.loss.csv"):
        assert _sha(reports[0] / name) == _sha(reports[1] / name), name
    manifest = json.loads((reports[0] / "data" / "manifest.json").read_text())
    assert manifest == json.loads((reports[1] / "data" / "manifest.json").read_text())
    assert "ALL (mAPH)" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("grid.extents = (16, 16, 12)\n")
    assert main(["gen-data", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "d")]) == 2
    assert "multiples of 8" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path), "--report",
                 str(tmp_path / "r")]) == 2


def test_cli_config_and_check(capsys):
    assert main(["config"]) == 0
    assert "gat.depth = 2" in capsys.readouterr().out
    assert main(["check", "--only", "fps-oracle", "--only", "identity-at-init"]) == 0
    out = capsys.readouterr().out
    assert "PASS  fps-oracle" in out and "2/2 suites passed" in out
    assert main(["check", "--only", "reversibility", "--inject-fault", "perturbed-inverse"]) == 1
    assert "FAIL  reversibility" in capsys.readouterr().out


def test_cli_ablate_contract(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl")]) == 0
    csv = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert csv[0] == "config,seed,class,APH_L2" and len(csv) == 1 + 3 * 3
    assert "beats both single-component rows" in capsys.readouterr().out
