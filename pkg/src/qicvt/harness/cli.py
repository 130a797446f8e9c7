"""``qicvt`` command line: gen-data, train, eval, ablate, check."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, to_text
from .train import TrainingDiverged

log = logging.getLogger("qicvt")


def thread_limit():
    """Cap BLAS threads at ``QICVT_THREADS`` when set."""
    n = os.environ.get("QICVT_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def workers() -> int:
    return max(1, int(os.environ.get("QICVT_THREADS", "1")))


def _load(path) -> ExperimentConfig:
    return load_config(path).validate() if path else ExperimentConfig().validate()


def cmd_gen_data(args) -> int:
    from .scenes import gen_scenes
    cfg = _load(args.config)
    manifest = gen_scenes(cfg, args.seed, args.out, workers=workers())
    print(f"wrote {len(manifest['files'])} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import check_compatible, save_checkpoint
    from .scenes import load_split
    from .train import train, write_loss_curve
    cfg = _load(args.config)
    data_cfg = load_config(Path(args.data) / "config.cfg")
    check_compatible(cfg, data_cfg)
    _, scenes = load_split(args.data, "train", data_cfg)
    if args.steps is not None:
        cfg = cfg.with_overrides(**{"train.steps": args.steps})
    result = train(cfg, scenes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.model)
    curve = out.with_suffix(".loss.csv")
    write_loss_curve(curve, result.losses)
    counts = result.model.parameter_counts()
    print(f"parameters: {sum(counts.values())} {counts}")
    print(f"wrote {out} and {curve}")
    return 0


def cmd_eval(args) -> int:
    from ..metrics.evaluation import evaluate, write_detections
    from .checkpoint import check_compatible, load_checkpoint
    from .model import run_detection
    from .scenes import load_split
    model = load_checkpoint(args.ckpt)
    data_cfg = load_config(Path(args.data) / "config.cfg")
    check_compatible(model.cfg, data_cfg)
    ids, scenes = load_split(args.data, args.split, data_cfg)
    dets = run_detection(model, scenes)
    report = evaluate(dets, [s.gts for s in scenes])
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.md").write_text(report.summary(Path(args.ckpt).stem))
    write_detections(out / "detections.txt", dets, ids)
    print(report.summary(Path(args.ckpt).stem), end="")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ablate
    cfg = _load(args.config)
    result = ablate(cfg, args.out, workers=workers())
    print(result.summary(), end="")
    return 0


def cmd_check(args) -> int:
    from .check import run_checks
    results = run_checks(faults=tuple(args.inject_fault or ()), only=args.only, stream=sys.stdout)
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} suites passed in {total:.1f}s")
    return 1 if failed else 0


def cmd_config(args) -> int:
    print(to_text(_load(args.config)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qicvt", description="Desk-scale LiDAR-camera fusion detector.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="config file (defaults when omitted)")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector on a dataset's train split")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; the loss curve goes next to it")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output directory")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="GAT/SELF component ablation over the configured seeds")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("check", help="run every invariant suite")
    c.add_argument("--inject-fault", action="append", choices=("perturbed-inverse",),
                   help="negative control: break a component on purpose")
    c.add_argument("--only", action="append", help="run only the named suite(s)")
    c.set_defaults(fn=cmd_check)

    s = sub.add_parser("config", help="print the effective config")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with thread_limit():
            return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as e:
        print(f"qicvt {args.command}: error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"qicvt {args.command}: training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
