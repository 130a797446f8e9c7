"""Synthetic LiDAR + camera scenes and their binary file format.

Scene file (little-endian): magic ``QICV``, version ``u32``, point count ``u32``,
``N x 4 f32`` points (x, y, z, reflectance), the image as an f32 tensor record,
ground-truth count ``u32``, then per box ``7 x f32`` (cx, cy, cz, l, w, h, yaw),
``u8`` class index and ``u32`` interior point count.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely

from ..frontend.pointcloud import RawPointCloud
from ..geometry import CLASSES, Calibration, box_corners_3d, points_in_boxes, rotation_2d
from ..metrics.evaluation import GroundTruthBox
from ..serialization import read_tensor, read_u32, write_tensor, write_u32
from .config import ExperimentConfig, load_config, to_text

MAGIC = b"QICV"
VERSION = 1
SPLITS = ("train", "val")

# mean (l, w, h) and per-dimension spread
CLASS_SIZES = {
    "VEH": ((4.5, 1.9, 1.6), (0.3, 0.1, 0.1)),
    "PED": ((0.9, 0.9, 1.75), (0.08, 0.08, 0.08)),
    "CYC": ((1.8, 0.7, 1.7), (0.1, 0.05, 0.08)),
}
CLASS_COLORS = np.array([[0.9, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.3, 0.95]])
SKY = np.array([0.55, 0.65, 0.8])
GROUND = np.array([0.3, 0.3, 0.3])
FRONT_REFLECTANCE, BACK_REFLECTANCE, GROUND_REFLECTANCE = 0.85, 0.35, 0.1
FACE_INSET = 0.02
SENSOR = np.array([0.0, 0.0, 1.8])
X_RANGE = (3.0, 19.0)


@dataclass
class SyntheticScene:
    cloud: RawPointCloud
    image: np.ndarray  # (H, W, 3) in [0, 1]
    gts: list[GroundTruthBox]
    calib: Calibration

    @property
    def boxes(self) -> np.ndarray:
        return np.array([g.box for g in self.gts]).reshape(-1, 7)

    @property
    def classes(self) -> np.ndarray:
        return np.array([CLASSES.index(g.cls) for g in self.gts], dtype=np.int64)


def calibration_for(cfg: ExperimentConfig) -> Calibration:
    return Calibration.forward_looking(cfg.image.height, cfg.image.width, cfg.image.hfov, float(SENSOR[2]))


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def place_boxes(rng: np.random.Generator, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping boxes inside the grid and the camera field of view."""
    d = cfg.data
    n = int(rng.integers(d.min_objects, d.max_objects + 1))
    probs = np.asarray(d.class_probs, dtype=np.float64)
    probs = probs / probs.sum()
    half_fov = np.tan(np.radians(cfg.image.hfov) / 2)
    y_lim = min(-cfg.grid.origin[1], cfg.grid.origin[1] + cfg.grid.voxel[1] * cfg.grid.extents[1])
    x_hi = min(X_RANGE[1], cfg.grid.origin[0] + cfg.grid.voxel[0] * cfg.grid.extents[0] - 1.5)
    boxes, classes = [], []
    for _ in range(50 * n):
        if len(boxes) == n:
            break
        c = int(rng.choice(3, p=probs))
        mean, spread = CLASS_SIZES[CLASSES[c]]
        lwh = np.maximum(np.asarray(mean) + rng.normal(size=3) * np.asarray(spread), 0.3)
        x = rng.uniform(X_RANGE[0], x_hi)
        radius = 0.5 * np.hypot(lwh[0], lwh[1])
        y_max = max(min(0.8 * x * half_fov - radius, y_lim - radius - 0.2), 0.0)
        y = rng.uniform(-y_max, y_max)
        yaw = rng.uniform(-np.pi, np.pi)
        if any(np.hypot(x - b[0], y - b[1]) < radius + 0.5 * np.hypot(b[3], b[4]) + 0.3 for b in boxes):
            continue
        boxes.append(np.array([x, y, lwh[2] / 2, lwh[0], lwh[1], lwh[2], yaw]))
        classes.append(c)
    return _f32(np.array(boxes).reshape(-1, 7)), np.array(classes, dtype=np.int64)


def _faces(box: np.ndarray):
    """Outward faces in the box frame: (normal, center, u axis, v axis, u extent, v extent)."""
    l, w, h = box[3:6]
    ex, ey, ez = np.eye(3)
    return [
        (ex, ex * l / 2, ey, ez, w, h),
        (-ex, -ex * l / 2, ey, ez, w, h),
        (ey, ey * w / 2, ex, ez, l, h),
        (-ey, -ey * w / 2, ex, ez, l, h),
        (ez, ez * h / 2, ex, ey, l, w),
    ]


def surface_points(rng: np.random.Generator, box: np.ndarray, density: float) -> np.ndarray:
    """Points on the sensor-facing faces; expected count ``density * area * cos / range^2``."""
    rot = np.eye(3)
    rot[:2, :2] = rotation_2d(box[6])
    center = box[:3]
    out = []
    for normal, fc, ua, va, ue, ve in _faces(box):
        n_w = rot @ normal
        c_w = center + rot @ fc
        to_sensor = SENSOR - c_w
        dist = np.linalg.norm(to_sensor)
        cos = float(n_w @ to_sensor) / dist
        if cos <= 0:
            continue
        n = rng.poisson(density * ue * ve * cos / dist ** 2)
        if n == 0:
            continue
        a = rng.uniform(-0.5, 0.5, size=(n, 1)) * (ue - 2 * FACE_INSET)
        b = rng.uniform(-0.5, 0.5, size=(n, 1)) * (ve - 2 * FACE_INSET)
        local = fc - normal * FACE_INSET + a * ua + b * va
        refl = np.where(local[:, 0] > 0, FRONT_REFLECTANCE, BACK_REFLECTANCE) + rng.normal(0, 0.03, size=n)
        out.append(np.column_stack([center + local @ rot.T, np.clip(refl, 0.0, 1.0)]))
    return np.concatenate(out) if out else np.zeros((0, 4))


def ground_points(rng: np.random.Generator, cfg: ExperimentConfig) -> np.ndarray:
    """Ground returns with density falling off as ``1 / range``."""
    n = cfg.data.ground_points
    lo = np.asarray(cfg.grid.origin, dtype=np.float64)
    hi = lo + np.asarray(cfg.grid.voxel) * np.asarray(cfg.grid.extents)
    r = np.exp(rng.uniform(np.log(1.0), np.log(hi[0] + 2.0), size=n))
    theta = rng.uniform(-np.pi / 3, np.pi / 3, size=n)
    z = rng.uniform(0.0, 0.05, size=n)
    refl = np.clip(GROUND_REFLECTANCE + rng.normal(0, 0.03, size=n), 0.0, 1.0)
    pts = np.column_stack([r * np.cos(theta), r * np.sin(theta), z, refl])
    keep = (pts[:, 0] >= lo[0]) & (pts[:, 0] < hi[0]) & (pts[:, 1] >= lo[1]) & (pts[:, 1] < hi[1])
    return pts[keep]


def render_image(boxes: np.ndarray, classes: np.ndarray, calib: Calibration, rng: np.random.Generator) -> np.ndarray:
    """Flat-shaded view of the boxes: class color, front half bright, back half dark, far first."""
    h, w = calib.image_size
    img = np.empty((h, w, 3))
    img[: int(round(calib.cy))] = SKY
    img[int(round(calib.cy)):] = GROUND
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    parts = []
    for box, c in zip(boxes, classes):
        fwd = np.array([np.cos(box[6]), np.sin(box[6]), 0.0]) * box[3] / 4
        for sign, shade in ((1.0, 1.0), (-1.0, 0.45)):
            half = box.copy()
            half[:3] = box[:3] + sign * fwd
            half[3] = box[3] / 2
            parts.append((np.linalg.norm(half[:3] - SENSOR), half, CLASS_COLORS[c] * shade))
    for _, half, color in sorted(parts, key=lambda p: -p[0]):
        uv, depth = calib.project(box_corners_3d(half))
        if (depth <= calib.near).any():
            continue
        hull = shapely.convex_hull(shapely.multipoints(uv))
        inside = shapely.contains_xy(hull, cols, rows)
        img[inside] = color
    img = img + rng.normal(0, 0.02, size=img.shape)
    return _f32(np.clip(img, 0.0, 1.0))


def generate_scene(rng: np.random.Generator, cfg: ExperimentConfig) -> SyntheticScene:
    calib = calibration_for(cfg)
    boxes, classes = place_boxes(rng, cfg)
    pts = [surface_points(rng, b, cfg.data.point_density) for b in boxes]
    pts.append(ground_points(rng, cfg))
    points = _f32(np.concatenate(pts))
    image = render_image(boxes, classes, calib, rng)
    counts = points_in_boxes(points[:, :3], boxes).sum(axis=1) if len(boxes) else np.zeros(0, dtype=int)
    gts = [GroundTruthBox(b, CLASSES[c], int(k)) for b, c, k in zip(boxes, classes, counts)]
    return SyntheticScene(RawPointCloud(points), image, gts, calib)


def mirror_scene(scene: SyntheticScene) -> SyntheticScene:
    """Reflect across the sensor's x-z plane; the camera looks along +x, so the image flips left-right."""
    pts = scene.cloud.points.copy()
    pts[:, 1] = -pts[:, 1]
    gts = []
    for g in scene.gts:
        b = g.box.copy()
        b[1], b[6] = -b[1], -b[6]
        gts.append(GroundTruthBox(b, g.cls, g.num_points))
    return SyntheticScene(RawPointCloud(pts), scene.image[:, ::-1].copy(), gts, scene.calib)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS.index(split), int(index)])


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_scene(path, scene: SyntheticScene):
    with open(path, "wb") as f:
        f.write(MAGIC)
        write_u32(f, VERSION)
        write_u32(f, len(scene.cloud))
        f.write(np.ascontiguousarray(scene.cloud.points, dtype="<f4").tobytes())
        write_tensor(f, scene.image, np.float32)
        write_u32(f, len(scene.gts))
        for g in scene.gts:
            f.write(np.asarray(g.box, dtype="<f4").tobytes())
            f.write(struct.pack("<BI", CLASSES.index(g.cls), g.num_points))


def read_scene(path, calib: Calibration) -> SyntheticScene:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a scene file")
        version = read_u32(f)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported scene version {version}")
        n = read_u32(f)
        raw = f.read(16 * n)
        if len(raw) != 16 * n:
            raise ValueError(f"{path}: truncated point block")
        points = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, 4)
        image = read_tensor(f, np.float32).astype(np.float64)
        gts = []
        for _ in range(read_u32(f)):
            raw = f.read(28 + 5)
            if len(raw) != 33:
                raise ValueError(f"{path}: truncated box record")
            box = np.frombuffer(raw[:28], dtype="<f4").astype(np.float64)
            cls, count = struct.unpack("<BI", raw[28:])
            if cls >= len(CLASSES):
                raise ValueError(f"{path}: bad class index {cls}")
            gts.append(GroundTruthBox(box, CLASSES[cls], count))
    if image.shape != tuple(calib.image_size) + (3,):
        raise ValueError(f"{path}: image {image.shape} does not match calibration {calib.image_size}")
    return SyntheticScene(RawPointCloud(points), image, gts, calib)


def _gen_one(args):
    cfg, seed, split, index, path = args
    write_scene(path, generate_scene(scene_rng(seed, split, index), cfg))
    return path


def _sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def gen_scenes(cfg: ExperimentConfig, seed: int, out_dir, workers: int = 1) -> dict:
    """Write ``train/`` and ``val/`` scene files, ``config.cfg`` and ``manifest.json``."""
    cfg.validate()
    out = Path(out_dir)
    try:
        for split in SPLITS:
            (out / split).mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e
    cfg = cfg.with_overrides(seed=int(seed))
    jobs = []
    counts = {"train": cfg.data.train_scenes, "val": cfg.data.val_scenes}
    for split in SPLITS:
        for i in range(counts[split]):
            jobs.append((cfg, int(seed), split, i, str(out / split / f"scene_{i:04d}.qicv")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_gen_one, jobs))
    else:
        for job in jobs:
            _gen_one(job)
    (out / "config.cfg").write_text(to_text(cfg))
    manifest = {"seed": int(seed), "files": {os.path.relpath(j[4], out): _sha256(j[4]) for j in jobs}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def scene_files(data_dir, split: str) -> list[Path]:
    return sorted((Path(data_dir) / split).glob("scene_*.qicv"))


def load_split(data_dir, split: str, cfg: ExperimentConfig | None = None) -> tuple[list[str], list[SyntheticScene]]:
    if cfg is None:
        cfg = load_config(Path(data_dir) / "config.cfg")
    calib = calibration_for(cfg)
    files = scene_files(data_dir, split)
    if not files:
        raise FileNotFoundError(f"no scenes under {Path(data_dir) / split}")
    return [f"{split}/{p.stem}" for p in files], [read_scene(p, calib) for p in files]
