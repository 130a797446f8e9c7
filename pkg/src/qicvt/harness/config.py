"""Experiment configuration: nested dataclasses read from flat ``key = value`` text.

Keys are dotted paths into the nested sections, e.g. ``gat.depth = 2`` or
``self.experts.k = 2``. Values are Python literals (numbers, tuples, quoted
strings); bare words are taken as strings and ``on``/``off``/``true``/``false``
as booleans. ``#`` starts a comment.
"""
from __future__ import annotations

import ast
import copy
import dataclasses
from dataclasses import dataclass, field

from ..frontend.pointcloud import VoxelGridSpec


@dataclass
class DataConfig:
    train_scenes: int = 16
    val_scenes: int = 16
    min_objects: int = 1
    max_objects: int = 6
    point_density: float = 600.0  # points per m^2 at 1 m, scaled by cos / r^2
    ground_points: int = 300
    class_probs: tuple = (0.4, 0.3, 0.3)


@dataclass
class GridConfig:
    origin: tuple = (0.0, -10.24, -0.5)
    voxel: tuple = (0.64, 0.64, 0.5)
    extents: tuple = (32, 32, 8)

    def spec(self) -> VoxelGridSpec:
        return VoxelGridSpec(tuple(float(v) for v in self.origin), tuple(float(v) for v in self.voxel),
                             tuple(int(e) for e in self.extents))


@dataclass
class ImageConfig:
    height: int = 32
    width: int = 32
    hfov: float = 90.0
    channels: int = 16
    hidden: int = 16


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64, 64)


@dataclass
class RPNConfig:
    hidden: int = 64
    train_proposals: int = 16
    eval_proposals: int = 32
    nms: float = 0.7
    gt_jitter: int = 6  # jittered copies of each GT box added to the training proposals
    cell_stats: bool = True
    # (l, w, h) per anchor family; the defaults are the synthetic class means
    anchor_sizes: tuple = ((4.5, 1.9, 1.6), (0.9, 0.9, 1.75), (1.8, 0.7, 1.7))


@dataclass
class RoIConfig:
    channels: int = 32
    margin: float = 1.0


@dataclass
class GATConfig:
    on: bool = True
    depth: int = 2
    heads: int = 4
    n_global: int = 4
    voxel_dim: int = 16
    align_dim: int = 16
    recompute: bool = False
    zero_init: bool = True


@dataclass
class ExpertsConfig:
    n: int = 4
    k: int = 2
    dim: int = 32
    hidden: int = 32


@dataclass
class GateConfig:
    noise: bool = True
    formula: str = "cited"
    balance: float = 0.0


@dataclass
class ContextConfig:
    source: str = "gvi"


@dataclass
class SELFConfig:
    on: bool = True
    experts: ExpertsConfig = field(default_factory=ExpertsConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    channels: int = 32
    keypoints: int = 0  # > 0 adds an FPS keypoint-count channel to the LiDAR input


@dataclass
class HeadConfig:
    hidden: int = 64
    descriptor: bool = True  # the head also sees the proposal's box-frame point descriptor


@dataclass
class TrainConfig:
    steps: int = 2000
    optimizer: str = "adam"  # adam | sgd (heavy-ball momentum)
    lr: float = 0.001
    rpn_lr_scale: float = 1.0  # learning-rate multiplier for the proposal head
    momentum: float = 0.9  # sgd momentum, or adam's first-moment decay
    weight_decay: float = 0.0
    clip: float = 5.0
    warmup: int = 50
    mirror: bool = True  # random left-right flips of scene and image
    log_every: int = 100


@dataclass
class EvalConfig:
    nms: float = 0.1  # per-class BEV IoU threshold
    max_detections: int = 32
    min_score: float = 0.0


@dataclass
class AblateConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    steps: int = 600


@dataclass
class PathsConfig:
    data: str = ""
    out: str = ""


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RPNConfig = field(default_factory=RPNConfig)
    roi: RoIConfig = field(default_factory=RoIConfig)
    gat: GATConfig = field(default_factory=GATConfig)
    self: SELFConfig = field(default_factory=SELFConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        validate(self)
        return self

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with ``{"gat.on": False, ...}``-style overrides (use ``__`` for dots in kwargs)."""
        cfg = copy_config(self)
        for key, value in dotted.items():
            set_key(cfg, key.replace("__", "."), value)
        return cfg


class ConfigError(ValueError):
    pass


_BOOL = {"on": True, "off": False, "true": True, "false": False, "yes": True, "no": False}


def parse_value(text: str):
    text = text.strip()
    if text.lower() in _BOOL:
        return _BOOL[text.lower()]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected on/off, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, list):
            value = tuple(value)
        if not isinstance(value, tuple):
            value = (value,)
        return value
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{key}: cannot assign a value to a section")


def set_key(cfg: ExperimentConfig, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(node) or p not in {f.name for f in dataclasses.fields(node)}:
            raise ConfigError(f"unknown config key {key!r}")
        node = getattr(node, p)
    last = parts[-1]
    if not dataclasses.is_dataclass(node) or last not in {f.name for f in dataclasses.fields(node)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(node, last, _coerce(value, getattr(node, last), key))


def flatten(cfg, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.extend(flatten(v, f"{prefix}{f.name}."))
        else:
            out.append((f"{prefix}{f.name}", v))
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return repr(v)


def to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(cfg))


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = copy_config(base) if base is not None else ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        try:
            set_key(cfg, key.strip(), parse_value(value))
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return copy.deepcopy(cfg)


def validate(cfg: ExperimentConfig):
    """Check every dimension against the preconditions of the modules it feeds."""
    errs = []
    ext = tuple(cfg.grid.extents)
    if len(ext) != 3 or any(not isinstance(e, int) or e < 8 or e % 8 for e in ext):
        errs.append(f"grid.extents {ext} must be three positive multiples of 8")
    if len(tuple(cfg.grid.voxel)) != 3 or any(v <= 0 for v in cfg.grid.voxel):
        errs.append("grid.voxel needs three positive sizes")
    if len(tuple(cfg.grid.origin)) != 3:
        errs.append("grid.origin needs three coordinates")
    if cfg.image.height % 4 or cfg.image.width % 4 or cfg.image.height < 4 or cfg.image.width < 4:
        errs.append(f"image {cfg.image.height}x{cfg.image.width} must have sides divisible by 4")
    if not 10 <= cfg.image.hfov < 170:
        errs.append("image.hfov must be in [10, 170) degrees")
    if len(tuple(cfg.backbone.widths)) != 4 or any(w < 1 for w in cfg.backbone.widths):
        errs.append("backbone.widths needs four positive widths")
    g = cfg.gat
    if cfg.image.channels % 2:
        errs.append(f"image.channels {cfg.image.channels} must be even for the reversible split")
    if g.voxel_dim % 2:
        errs.append(f"gat.voxel_dim {g.voxel_dim} must be even")
    if g.depth < 1 or g.heads < 1 or g.n_global < 1:
        errs.append("gat depth/heads/n_global must be positive")
    else:
        for name, dim in (("image.channels", cfg.image.channels), ("gat.voxel_dim", g.voxel_dim)):
            if (dim // 2) % g.heads:
                errs.append(f"gat.heads {g.heads} must divide half of {name} ({dim // 2})")
    s = cfg.self
    if not 1 <= s.experts.k <= s.experts.n:
        errs.append(f"self.experts.k={s.experts.k} must be in [1, self.experts.n={s.experts.n}]")
    if s.gate.formula not in ("cited", "literal"):
        errs.append(f"self.gate.formula must be cited or literal, got {s.gate.formula!r}")
    if s.context.source not in ("gvi", "gi"):
        errs.append(f"self.context.source must be gvi or gi, got {s.context.source!r}")
    if s.keypoints < 0:
        errs.append("self.keypoints must be >= 0")
    d = cfg.data
    if not 1 <= d.min_objects <= d.max_objects:
        errs.append("need 1 <= data.min_objects <= data.max_objects")
    if d.train_scenes < 1 or d.val_scenes < 0 or d.train_scenes + d.val_scenes > 500:
        errs.append("scene counts must satisfy train >= 1, val >= 0, total <= 500")
    if len(tuple(d.class_probs)) != 3 or any(p < 0 for p in d.class_probs) or sum(d.class_probs) <= 0:
        errs.append("data.class_probs needs three non-negative weights")
    if not 0 < cfg.rpn.train_proposals <= 128 or not 0 < cfg.rpn.eval_proposals <= 128:
        errs.append("proposal counts must be in [1, 128]")
    sizes = cfg.rpn.anchor_sizes
    if not sizes or not all(isinstance(a, (tuple, list)) and len(a) == 3 and all(
            isinstance(x, (int, float)) and x > 0 for x in a) for a in sizes):
        errs.append("rpn.anchor_sizes must be a non-empty tuple of positive (l, w, h) triples")
    t = cfg.train
    if t.optimizer not in ("adam", "sgd"):
        errs.append(f"train.optimizer must be adam or sgd, got {t.optimizer!r}")
    if t.steps < 0 or t.lr <= 0 or t.rpn_lr_scale <= 0 or not 0 <= t.momentum < 1 or t.clip <= 0:
        errs.append("train settings need steps >= 0, lr > 0, rpn_lr_scale > 0, momentum in [0, 1), clip > 0")
    if len(tuple(cfg.ablate.seeds)) < 1:
        errs.append("ablate.seeds must not be empty")
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
