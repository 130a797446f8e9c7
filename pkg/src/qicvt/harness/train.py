"""Single-threaded, seeded training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..nn import SGD, Adam
from .config import ExperimentConfig
from .model import Detector
from .scenes import SyntheticScene, mirror_scene

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Detector
    losses: list[dict] = field(default_factory=list)


def lr_at(step: int, cfg: ExperimentConfig, total: int) -> float:
    """Linear warmup, then cosine decay to a tenth of the base rate."""
    t = cfg.train
    if step < t.warmup:
        return t.lr * (step + 1) / t.warmup
    frac = (step - t.warmup) / max(1, total - t.warmup)
    return t.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def train(cfg: ExperimentConfig, scenes: list[SyntheticScene], steps: int | None = None,
          model: Detector | None = None) -> TrainResult:
    cfg.validate()
    steps = cfg.train.steps if steps is None else steps
    if model is None:
        model = Detector(cfg)
    if not scenes:
        raise ValueError("no training scenes")
    preps = [model.prepare(s) for s in scenes]
    mirrored = [model.prepare(mirror_scene(s)) for s in scenes] if cfg.train.mirror else None
    rng = np.random.default_rng([int(cfg.seed), 2])
    named = list(model.named_parameters())
    scales = [cfg.train.rpn_lr_scale if name.startswith("rpn.") else 1.0 for name, _ in named]
    params = [p for _, p in named]
    t = cfg.train
    if t.optimizer == "adam":
        opt = Adam(params, t.lr, (t.momentum, 0.999), weight_decay=t.weight_decay, clip_norm=t.clip, lr_scales=scales)
    else:
        opt = SGD(params, t.lr, t.momentum, t.weight_decay, t.clip, lr_scales=scales)
    result = TrainResult(model)
    order: list[int] = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(preps)))
        i = order.pop()
        prep = mirrored[i] if mirrored is not None and rng.random() < 0.5 else preps[i]
        opt.lr = lr_at(step, cfg, steps)
        try:
            out = model.forward(prep, rng, train=True)
            loss, parts = model.loss(prep, out)
        except T.NonFiniteError as e:
            raise TrainingDiverged(f"step {step}, scene {i}: non-finite value in forward pass ({e})") from e
        total = float(loss.data)
        if not math.isfinite(total):
            raise TrainingDiverged(f"step {step}, scene {i}: loss {total}, parts {parts}, lr {opt.lr:.3g}")
        opt.zero_grad()
        try:
            T.backward(loss)
        except T.NonFiniteError as e:
            raise TrainingDiverged(f"step {step}, scene {i}: non-finite gradient ({e})") from e
        norm = opt.step()
        if not math.isfinite(norm):
            raise TrainingDiverged(f"step {step}, scene {i}: gradient norm {norm}, parts {parts}")
        result.losses.append({"step": step, "scene": int(i), "loss": total, "grad_norm": norm, "lr": opt.lr, **parts})
        if cfg.train.log_every and step % cfg.train.log_every == 0:
            log.info("step %d loss %.4f %s", step, total, {k: round(v, 4) for k, v in parts.items()})
    return result


LOSS_KEYS = ("step", "scene", "loss", "grad_norm", "lr", "rpn_cls", "rpn_reg", "conf", "cls", "reg", "balance")


def write_loss_curve(path, losses: list[dict]):
    with open(path, "w") as f:
        f.write(",".join(LOSS_KEYS) + "\n")
        for row in losses:
            f.write(",".join(repr(row.get(k, 0.0)) for k in LOSS_KEYS) + "\n")
