"""Checkpoint file: magic ``QCKP``, version, config text, then named parameter sections.

Each section is ``name:str``, tensor count ``u32``, then per tensor ``name:str``
and an f64 tensor record. A disabled component is written as an empty section.
"""
from __future__ import annotations

import numpy as np

from ..serialization import read_str, read_tensor, read_u32, write_str, write_tensor, write_u32
from .config import ExperimentConfig, parse_config, to_text
from .model import SECTIONS, Detector

MAGIC = b"QCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Detector):
    with open(path, "wb") as f:
        f.write(MAGIC)
        write_u32(f, VERSION)
        write_str(f, to_text(model.cfg))
        sections = model.sections()
        write_u32(f, len(SECTIONS))
        for name in SECTIONS:
            mod = sections[name]
            params = list(mod.named_parameters()) if mod is not None else []
            write_str(f, name)
            write_u32(f, len(params))
            for pname, p in params:
                write_str(f, pname)
                write_tensor(f, p.data, np.float64)


def read_checkpoint(path) -> tuple[ExperimentConfig, dict[str, dict[str, np.ndarray]]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        version = read_u32(f)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        cfg = parse_config(read_str(f))
        sections = {}
        for _ in range(read_u32(f)):
            name = read_str(f)
            sections[name] = {read_str(f): read_tensor(f, np.float64) for _ in range(read_u32(f))}
    return cfg, sections


def load_checkpoint(path) -> Detector:
    cfg, sections = read_checkpoint(path)
    model = Detector(cfg)
    if set(sections) != set(SECTIONS):
        raise CheckpointError(f"{path}: sections {sorted(sections)} != {sorted(SECTIONS)}")
    for name, mod in model.sections().items():
        state = sections[name]
        if mod is None:
            if state:
                raise CheckpointError(f"{path}: section {name!r} has parameters but the component is off")
            continue
        try:
            mod.load_state_dict(state)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: section {name!r}: {e}") from None
    return model


def check_compatible(model_cfg: ExperimentConfig, data_cfg: ExperimentConfig):
    """The dataset must share the grid and camera the model was built for."""
    problems = []
    for key in ("grid", "image"):
        a, b = getattr(model_cfg, key), getattr(data_cfg, key)
        if key == "image":
            a = (a.height, a.width, a.hfov)
            b = (b.height, b.width, b.hfov)
        if a != b:
            problems.append(f"{key}: checkpoint {a} vs dataset {b}")
    if problems:
        raise CheckpointError("checkpoint/config mismatch: " + "; ".join(problems))
