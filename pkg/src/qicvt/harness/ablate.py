"""Component ablation: GAT-only, SELF-only and GAT+SELF over a fixed seed set."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import CLASSES
from ..metrics.evaluation import evaluate
from .config import ExperimentConfig
from .model import Detector, run_detection
from .scenes import generate_scene, scene_rng
from .train import train

log = logging.getLogger(__name__)

ROWS = {
    "GAT-only": {"gat.on": True, "self.on": False},
    "SELF-only": {"gat.on": False, "self.on": True},
    "GAT+SELF": {"gat.on": True, "self.on": True},
}
COMBINED = "GAT+SELF"


@dataclass
class AblationResult:
    seeds: tuple
    aph: dict = field(default_factory=dict)  # (row, seed, class) -> APH L2
    maph: dict = field(default_factory=dict)  # (row, seed) -> mAPH L2
    params: dict = field(default_factory=dict)  # row -> parameter count
    seconds: float = 0.0

    def wins(self) -> list[bool]:
        singles = [r for r in ROWS if r != COMBINED]
        return [self.maph[(COMBINED, s)] > max(self.maph[(r, s)] for r in singles) for s in self.seeds]

    @property
    def passed(self) -> bool:
        return sum(self.wins()) >= len(self.seeds) - 1

    def to_csv(self) -> str:
        lines = ["config,seed,class,APH_L2"]
        for row in ROWS:
            for s in self.seeds:
                for c in CLASSES:
                    lines.append(f"{row},{s},{c},{self.aph[(row, s, c)]:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = ["# Component ablation (mAPH, L2)", ""]
        out.append("parameters: " + ", ".join(f"{r} {self.params[r]}" for r in ROWS))
        out.append("")
        out.append("| config | " + " | ".join(f"seed {s}" for s in self.seeds) + " | mean |")
        out.append("|---|" + "---|" * (len(self.seeds) + 1))
        for row in ROWS:
            vals = [self.maph[(row, s)] for s in self.seeds]
            out.append(f"| {row} | " + " | ".join(f"{100 * v:.2f}" for v in vals) + f" | {100 * np.mean(vals):.2f} |")
        wins = self.wins()
        out.append("")
        out.append(f"{COMBINED} beats both single-component rows on {sum(wins)}/{len(wins)} seeds: "
                   f"{'PASS' if self.passed else 'FAIL'} (needs >= {len(wins) - 1})")
        out.append(f"wall time: {self.seconds:.0f} s")
        return "\n".join(out) + "\n"


def row_config(cfg: ExperimentConfig, row: str, seed: int) -> ExperimentConfig:
    return cfg.with_overrides(seed=int(seed), **ROWS[row]).validate()


def parameter_counts(cfg: ExperimentConfig) -> dict[str, int]:
    return {row: Detector(row_config(cfg, row, 0)).num_parameters() for row in ROWS}


def _run(args) -> tuple[str, int, dict]:
    cfg, row, seed, train_scenes, val_scenes = args
    rcfg = row_config(cfg, row, seed)
    res = train(rcfg, train_scenes, steps=cfg.ablate.steps)
    report = evaluate(run_detection(res.model, val_scenes), [s.gts for s in val_scenes])
    return row, seed, {c: report.aph[(c, 2)] for c in CLASSES} | {"ALL": report.mAPH_L2}


def ablate(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> AblationResult:
    cfg.validate()
    t0 = time.time()
    result = AblationResult(tuple(int(s) for s in cfg.ablate.seeds))
    result.params = parameter_counts(cfg)
    log.info("parameter counts: %s", result.params)
    jobs = []
    for seed in result.seeds:
        tr = [generate_scene(scene_rng(seed, "train", i), cfg) for i in range(cfg.data.train_scenes)]
        va = [generate_scene(scene_rng(seed, "val", i), cfg) for i in range(cfg.data.val_scenes)]
        jobs.extend((cfg, row, seed, tr, va) for row in ROWS)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run, jobs))
    else:
        outputs = []
        for job in jobs:
            outputs.append(_run(job))
            log.info("%s seed %d: mAPH L2 %.4f", job[1], job[2], outputs[-1][2]["ALL"])
    for row, seed, vals in outputs:
        for c in CLASSES:
            result.aph[(row, seed, c)] = vals[c]
        result.maph[(row, seed)] = vals["ALL"]
    result.seconds = time.time() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(result.to_csv())
        (out / "ablation.md").write_text(result.summary())
    return result
