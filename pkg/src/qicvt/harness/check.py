"""One-command invariant suites with fixed seeds and per-suite timing."""
from __future__ import annotations

import io
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import shapely

from .. import tensor as T
from ..frontend.pointcloud import fps
from ..gat import GAT, ReversibleBlock
from ..geometry import CLASSES, bev_corners
from ..gradcheck import grad_check
from ..metrics.evaluation import Detection, GroundTruthBox, evaluate
from ..metrics.iou import iou_3d_matrix
from ..moe import SELF, MixtureOfExperts, moe_forward, top_k_gate
from ..tensor import Tensor, no_grad
from . import oracles
from .config import ExperimentConfig

FAULTS = ("perturbed-inverse",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _max_err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def random_block(rng: np.random.Generator, dtype=np.float64) -> tuple[ReversibleBlock, Tensor]:
    heads = int(rng.choice([1, 2, 4]))
    # half widths below 4 make layer norm nearly a sign function, which no 32-bit inverse survives
    dim = 2 * heads * int(rng.integers(max(1, 4 // heads), 4 if heads > 1 else 9))
    block = ReversibleBlock(rng, dim, heads, int(rng.integers(1, 5)), zero_init=False)
    for p in block.parameters():
        p.data = p.data.astype(dtype)
    x = Tensor(rng.normal(size=(int(rng.integers(2, 20)), dim)).astype(dtype))
    return block, x


def suite_reversibility(faults=(), cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst64 = worst32 = 0.0
    with no_grad():
        for i in range(cases):
            block, x = random_block(rng)
            y = block.forward(x)
            if "perturbed-inverse" in faults:
                block.mlp.fc2.bias.data = block.mlp.fc2.bias.data + 1e-3
            worst64 = max(worst64, _max_err(block.inverse(y).data, x.data))
        for i in range(cases):
            block, x = random_block(rng, np.float32)
            y = block.forward(x)
            worst32 = max(worst32, _max_err(block.inverse(y).data, x.data))
    ok = worst64 <= 1e-10 and worst32 <= 1e-5
    return ok, f"max |inv(fwd(x)) - x|: {worst64:.2e} (f64), {worst32:.2e} (f32)"


def suite_identity(faults=()) -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    with no_grad():
        for _ in range(10):
            gat = GAT(rng, image_channels=8, voxel_channels=6, voxel_dim=4, depth=2, heads=2, n_global=2)
            g_i = Tensor(rng.normal(size=(4, 4, 8)))
            g_v = Tensor(rng.normal(size=(2, 2, 2, 6)))
            worst = max(worst, _max_err(gat(g_i, g_v).data, g_i.data))
    return worst <= 1e-12, f"max |G_VI - G_I| at init: {worst:.2e}"


def suite_gating(faults=(), cases: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(1, 17))
        k = int(rng.integers(1, n + 1))
        w = top_k_gate(Tensor(rng.normal(size=n) * 3), k).data
        if np.count_nonzero(w) != k or abs(w.sum() - 1.0) > 1e-6 or (w < 0).any():
            bad += 1
    calls_ok = True
    for _ in range(20):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        p = int(rng.integers(1, 12))
        moe = MixtureOfExperts(rng, 5, 3, 4, n, k, noise=False)
        out = moe_forward(Tensor(rng.normal(size=(p, 5))), moe)
        calls_ok &= out.expert_calls == k * p
    return bad == 0 and calls_ok, f"{bad}/{cases} gate vectors off the k-sparse simplex; expert calls == k per input: {calls_ok}"


def suite_moe_oracle(faults=(), cases: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    worst = 0.0
    with no_grad():
        for _ in range(cases):
            n = int(rng.integers(1, 9))
            k = int(rng.integers(1, n + 1))
            din, dout, p = int(rng.integers(1, 7)), int(rng.integers(1, 6)), int(rng.integers(1, 10))
            moe = MixtureOfExperts(rng, din, dout, 5, n, k, noise=True)
            moe.gate.w_noise.data = rng.normal(size=moe.gate.w_noise.shape)
            x = rng.normal(size=(p, din))
            noise = rng.normal(size=(p, n))
            out = moe_forward(Tensor(x), moe, train_mode=True, noise=noise)
            logits = x @ moe.gate.w_gate.data + noise * np.logaddexp(0, x @ moe.gate.w_noise.data)
            experts = [lambda a, e=e: e(Tensor(a)).data for e in moe.experts]
            worst = max(worst, _max_err(out.y.data, oracles.dense_moe(x, logits, k, experts)))
    return worst <= 1e-9, f"max |sparse - dense| over {cases} cases: {worst:.2e}"


def gradient_case(rng: np.random.Generator):
    """A small GAT -> context -> SELF -> scalar loss with fixed noise; returns (loss_fn, tensors)."""
    c_i, c_v, p = 4, 3, 3
    gat = GAT(rng, image_channels=c_i, voxel_channels=c_v, voxel_dim=4, depth=int(rng.integers(1, 3)),
              heads=int(rng.choice([1, 2])), n_global=2, align_dim=4, zero_init=False)
    self_ = SELF(rng, d_lidar=5, d_image=c_i, d_expert=3, hidden=4, c_f=3, n_experts=3, k=2)
    for m in (self_.moe_l, self_.moe_i):
        m.gate.w_noise.data = rng.normal(size=m.gate.w_noise.shape) * 0.3
    g_i = Tensor(rng.normal(size=(2, 2, c_i)))
    g_v = Tensor(rng.normal(size=(2, 1, 2, c_v)))
    g_l = Tensor(rng.normal(size=(p, 5)))
    pool = Tensor(rng.dirichlet(np.ones(4), size=p))
    sqdist = rng.uniform(0, 4, size=(4, 4))
    noise_l, noise_i = rng.normal(size=(p, 3)), rng.normal(size=(p, 3))
    with no_grad():
        g_vi0 = gat(g_i, g_v, sqdist)
        ctx0 = pool @ g_vi0.reshape(4, c_i)
        idx_l = self_.moe_l.gate(g_l, train_mode=True, noise=noise_l).data.argsort(axis=1, kind="stable")
        idx_i = self_.moe_i.gate(ctx0, train_mode=True, noise=noise_i).data.argsort(axis=1, kind="stable")
    idx_l, idx_i = idx_l[:, ::-1][:, :2], idx_i[:, ::-1][:, :2]
    target = rng.normal(size=(p, 3))

    def loss():
        g_vi = gat(g_i, g_v, sqdist)
        ctx = pool @ g_vi.reshape(4, c_i)
        fused = self_(g_l, ctx, train_mode=True, noise_l=noise_l, noise_i=noise_i, indices_l=idx_l, indices_i=idx_i)
        return ((fused.y - Tensor(target)) ** 2.0).sum()

    params = gat.parameters() + self_.parameters()
    picks = [params[i] for i in rng.choice(len(params), size=min(6, len(params)), replace=False)]
    return loss, [g_i, g_v, g_l] + picks


def suite_gradients(faults=(), cases: int = 10) -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(cases):
        loss, xs = gradient_case(rng)
        worst = max(worst, grad_check(loss, xs, h=1e-6))
    return worst <= 1e-4, f"max relative error vs central differences over {cases} configurations: {worst:.2e}"


def suite_fps(faults=(), cases: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(1, 65))
        xyz = rng.normal(size=(n, 3))
        if rng.random() < 0.3:
            xyz = np.round(xyz, 1)  # duplicates and ties
        k = int(rng.integers(1, n + 1))
        seed = int(rng.integers(0, n))
        bad += list(fps(xyz, k, seed).indices) != oracles.fps_bruteforce(xyz, k, seed)
    return bad == 0, f"{bad}/{cases} clouds differ from brute-force max-min selection"


def random_box(rng: np.random.Generator, spread: float = 2.0) -> np.ndarray:
    return np.array([*rng.uniform(-spread, spread, 2), rng.uniform(0, 1),
                     *rng.uniform(0.5, 3.0, 3), rng.uniform(-np.pi, np.pi)])


def suite_iou(faults=(), cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    a = np.array([random_box(rng) for _ in range(cases)])
    b = np.array([random_box(rng) for _ in range(cases)])
    got = np.diag(iou_3d_matrix(a, b))
    want = np.empty(cases)
    for i in range(cases):
        pa, pb = shapely.Polygon(bev_corners(a[i])), shapely.Polygon(bev_corners(b[i]))
        inter_h = max(0.0, min(a[i, 2] + a[i, 5] / 2, b[i, 2] + b[i, 5] / 2) - max(a[i, 2] - a[i, 5] / 2, b[i, 2] - b[i, 5] / 2))
        inter = pa.intersection(pb).area * inter_h
        want[i] = inter / (np.prod(a[i, 3:6]) + np.prod(b[i, 3:6]) - inter)
    err = _max_err(got, want)
    return err <= 1e-9, f"max |IoU - polygon-library IoU|: {err:.2e}"


def random_fixture(rng: np.random.Generator):
    n_gt, n_det = int(rng.integers(0, 6)), int(rng.integers(0, 11))
    gts = []
    for _ in range(n_gt):
        gts.append((random_box(rng, 3.0), CLASSES[rng.integers(0, 3)], int(rng.integers(0, 12))))
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.6:
            g = gts[rng.integers(0, len(gts))]
            box = g[0] + np.concatenate([rng.normal(0, 0.15, 3), rng.normal(0, 0.1, 3), rng.normal(0, 0.8, 1)])
            box[3:6] = np.abs(box[3:6]) + 0.1
            cls = g[1] if rng.random() < 0.85 else CLASSES[rng.integers(0, 3)]
        else:
            box, cls = random_box(rng, 3.0), CLASSES[rng.integers(0, 3)]
        score = float(rng.integers(0, 5)) / 4 if rng.random() < 0.3 else float(rng.random())
        dets.append((box, cls, score))
    return dets, gts


def suite_metrics(faults=(), cases: int = 50) -> tuple[bool, str]:
    rng = np.random.default_rng(8)
    thresholds = {"VEH": 0.7, "PED": 0.5, "CYC": 0.5}
    worst, aph_le_ap = 0.0, True
    for _ in range(cases):
        scenes = [random_fixture(rng) for _ in range(int(rng.integers(1, 3)))]
        dets = [[Detection(b, c, s) for b, c, s in d] for d, _ in scenes]
        gts = [[GroundTruthBox(b, c, n) for b, c, n in g] for _, g in scenes]
        rep = evaluate(dets, gts, thresholds)
        ref = oracles.evaluate_bruteforce(scenes, thresholds)
        for key, (ap, aph) in ref.items():
            worst = max(worst, abs(rep.ap[key] - ap), abs(rep.aph[key] - aph))
            aph_le_ap &= rep.aph[key] <= rep.ap[key] + 1e-12
    return worst <= 1e-12 and aph_le_ap, f"max |evaluate - exhaustive oracle|: {worst:.2e}; APH <= AP: {aph_le_ap}"


def suite_scenes(faults=()) -> tuple[bool, str]:
    from .scenes import generate_scene, read_scene, scene_rng, write_scene, calibration_for
    cfg = ExperimentConfig()
    bad, total = 0, 0
    with tempfile.TemporaryDirectory() as d:
        for i in range(3):
            scene = generate_scene(scene_rng(11, "train", i), cfg)
            path = Path(d) / f"s{i}.qicv"
            write_scene(path, scene)
            back = read_scene(path, calibration_for(cfg))
            for g in back.gts:
                total += 1
                bad += oracles.count_inside(back.cloud.points, g.box) != g.num_points
    return bad == 0, f"{bad}/{total} stored interior counts differ from recomputed containment"


def suite_checkpoint(faults=()) -> tuple[bool, str]:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import Detector
    cfg = ExperimentConfig().with_overrides(**{"gat.depth": 1})
    model = Detector(cfg)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
    a, b = model.state_dict(), back.state_dict()
    same = a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    return same, f"{len(a)} tensors round-tripped bit-exactly: {same}"


SUITES: dict[str, Callable] = {
    "reversibility": suite_reversibility,
    "identity-at-init": suite_identity,
    "gating-simplex": suite_gating,
    "moe-oracle": suite_moe_oracle,
    "gradients": suite_gradients,
    "fps-oracle": suite_fps,
    "iou-oracle": suite_iou,
    "metrics-oracle": suite_metrics,
    "scene-containment": suite_scenes,
    "checkpoint-roundtrip": suite_checkpoint,
}


def run_checks(faults=(), only=None, stream: io.TextIOBase | None = None) -> list[SuiteResult]:
    for f in faults:
        if f not in FAULTS:
            raise ValueError(f"unknown fault {f!r}; known: {FAULTS}")
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn(faults)
        except Exception as e:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        r = SuiteResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(r)
        if stream is not None:
            stream.write(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.seconds:6.2f}s  {r.detail}\n")
            stream.flush()
    return results
