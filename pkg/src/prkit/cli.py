"""prkit command-line interface.

    prkit <command> --config <path> [--set key=value]... [--out <dir>]

Commands: datagen, train-teacher, train-coarse, train-student, pseudo-label,
infer, eval, gradcheck, oracle-check. Every run writes a config echo beside
its outputs. Exit codes: 0 success, 2 config error, 3 IO error, 4 numerical
failure, 5 self-check failure.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, config as cfgmod, report as rp
from . import scenegen as sg
from .errors import CheckFailure, ConfigError, IOFormatError, NumericalError
from .io_formats import read_depth, write_depth
from .pipeline import (Checkpoint, RunLog, evaluate_checkpoint,
                       generate_pseudo_labels, train_coarse_real,
                       train_student, train_teacher, worker_count)
from .metrics import aggregate_reports, evaluate_image
from .types import DepthMap


def _load_records(cfg, split, with_pseudo=False, require=True):
    root = Path(cfg["data"]["root"])
    records = sg.load_split(root, split, with_pseudo=with_pseudo)
    if require and not records:
        raise IOFormatError(f"no scenes found under {root / split}")
    return records


def cmd_datagen(cfg, out_dir):
    """Write train/val splits of procedurally generated scenes; the train
    and val splits carry both the dense synthetic GT and the degraded
    real-domain GT (sparse depth + validity)."""
    scfg = cfgmod.scene_config(cfg)
    dcfg = cfgmod.degrade_config(cfg)
    root = Path(cfg["data"]["root"])
    base_seed = cfg["data"]["seed"]
    counts = {"train": cfg["data"]["n_train"], "val": cfg["data"]["n_val"]}
    for split, n in counts.items():
        offset = 0 if split == "train" else 100000
        for i in range(n):
            scene = sg.generate_scene(base_seed + offset + i, scfg)
            degraded = sg.degrade_to_real(scene, dcfg)
            sg.write_scene(root, split, i, scene, degraded)
    print(f"wrote {counts['train']} train + {counts['val']} val scenes to {root}")
    return 0


def cmd_train_teacher(cfg, out_dir):
    records = _load_records(cfg, "train")
    tcfg = cfgmod.train_config(cfg)
    runlog = RunLog(out_dir / "runlog.jsonl")
    runlog.log(kind="meta", config_hash=cfgmod.config_hash(cfg),
               seed=tcfg.seed, started=time.time())
    ckpt = train_teacher(records, tcfg, runlog)
    ckpt.config = cfg
    ckpt.save(out_dir / "teacher.ckpt")
    rp.render_loss_curves(out_dir / "loss_curves.png", runlog.entries)
    print(f"teacher checkpoint -> {out_dir / 'teacher.ckpt'}")
    return 0


def cmd_train_coarse(cfg, out_dir):
    records = _load_records(cfg, "train")
    tcfg = cfgmod.train_config(cfg)
    runlog = RunLog(out_dir / "runlog.jsonl")
    runlog.log(kind="meta", config_hash=cfgmod.config_hash(cfg),
               seed=tcfg.seed, started=time.time())
    ckpt = train_coarse_real(records, tcfg, runlog)
    ckpt.config = cfg
    ckpt.save(out_dir / "coarse_real.ckpt")
    rp.render_loss_curves(out_dir / "loss_curves.png", runlog.entries)
    print(f"real-domain coarse checkpoint -> {out_dir / 'coarse_real.ckpt'}")
    return 0


def cmd_pseudo_label(cfg, out_dir):
    teacher_path = cfg["eval"]["checkpoint"]
    if not teacher_path:
        raise ConfigError("pseudo-label needs eval.checkpoint = teacher path")
    teacher = Checkpoint.load(teacher_path)
    tcfg = cfgmod.train_config(cfg)
    records = _load_records(cfg, "train")
    generate_pseudo_labels(teacher, records, tcfg,
                           out_dir=cfg["data"]["root"], split="train")
    print(f"pseudo labels written beside the dataset under "
          f"{Path(cfg['data']['root']) / 'train'}")
    return 0


def cmd_train_student(cfg, out_dir):
    records = _load_records(cfg, "train", with_pseudo=True)
    tcfg = cfgmod.train_config(cfg)
    teacher_path = cfg["eval"]["checkpoint"]
    if not teacher_path:
        raise ConfigError("train-student needs eval.checkpoint = teacher path")
    teacher = Checkpoint.load(teacher_path)
    coarse_path = cfg["infer"]["checkpoint"]
    if not coarse_path:
        raise ConfigError("train-student needs infer.checkpoint = coarse-real path")
    coarse_real = Checkpoint.load(coarse_path)
    runlog = RunLog(out_dir / "runlog.jsonl")
    runlog.log(kind="meta", config_hash=cfgmod.config_hash(cfg),
               seed=tcfg.seed, started=time.time())
    ckpt = train_student(records, teacher, coarse_real, tcfg, runlog)
    ckpt.config = cfg
    ckpt.save(out_dir / "student.ckpt")
    rp.render_loss_curves(out_dir / "loss_curves.png", runlog.entries)
    print(f"student checkpoint -> {out_dir / 'student.ckpt'}")
    return 0


def cmd_infer(cfg, out_dir):
    ckpt_path = cfg["infer"]["checkpoint"]
    if not ckpt_path:
        raise ConfigError("infer needs infer.checkpoint")
    split = cfg["infer"]["split"]
    records = _load_records(cfg, split)
    tcfg = cfgmod.train_config(cfg)
    ckpt = Checkpoint.load(ckpt_path)
    from .pipeline import CoarseCache, build_nets, predict_full
    coarse, refiner = build_nets(ckpt, tcfg)
    cache = CoarseCache(coarse, tcfg.model.coarse_downsample)
    pred_dir = out_dir / split
    pred_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        pred = predict_full(coarse, refiner, rec.image, tcfg, cache, rec)
        write_depth(pred_dir / f"{rec.index:05d}_pred.pfm", pred)
    print(f"wrote {len(records)} predictions to {pred_dir}")
    return 0


def cmd_eval(cfg, out_dir, config_echo_hash):
    split = cfg["eval"]["split"]
    records = _load_records(cfg, split)
    ev = cfg["eval"]
    per_image = []
    preds = []
    if ev["pred_dir"]:
        pred_dir = Path(ev["pred_dir"])
        for rec in records:
            path = pred_dir / f"{rec.index:05d}_pred.pfm"
            if not path.exists():
                # allow evaluating GT-as-prediction layouts (identity checks)
                path = pred_dir / f"{rec.index:05d}_depth.pfm"
            if not path.exists():
                raise IOFormatError(f"missing prediction for scene {rec.index} "
                                    f"under {ev['pred_dir']}")
            pred = read_depth(path)
            pred = DepthMap(pred.values, np.ones_like(pred.valid))
            gt = rec.sparse_depth if ev["domain"] == "real" and rec.sparse_depth \
                else rec.depth
            per_image.append(evaluate_image(
                pred, gt, rec.seg, rel_threshold=ev["sobel_rel_threshold"],
                see_radius=ev["see_radius"], edge_tol=ev["edge_tol"],
                theta=ev["dbe_theta"]))
            preds.append(pred)
    elif ev["checkpoint"]:
        tcfg = cfgmod.train_config(cfg)
        ckpt = Checkpoint.load(ev["checkpoint"])
        _, per_image, preds = evaluate_checkpoint(ckpt, records, tcfg,
                                                  domain=ev["domain"])
    else:
        raise ConfigError("eval needs eval.pred_dir or eval.checkpoint")
    aggregate = aggregate_reports(per_image)
    echo = {"hash": config_echo_hash}
    rp.write_report(out_dir, per_image, aggregate, echo)
    rp.render_figures(out_dir, records, preds, per_image, aggregate,
                      n_figures=ev["figures_n"])
    d1 = aggregate["delta1"] * 100
    print(f"eval[{split}]: delta1={d1:.2f}% rmse={aggregate['rmse']:.3f} "
          f"recall={aggregate['recall'] * 100:.2f}% -> {out_dir / 'report.json'}")
    return 0


def cmd_gradcheck(cfg, out_dir):
    results = checks.run_gradcheck()
    width = max(len(n) for n, _ in results)
    for name, err in results:
        print(f"{name:<{width}}  {err:.3e}")
    bad = [(n, e) for n, e in results if e > checks.GRAD_TOL]
    if bad:
        raise CheckFailure(f"{len(bad)} op(s) exceeded {checks.GRAD_TOL}: "
                           + ", ".join(n for n, _ in bad))
    print(f"all {len(results)} cases within {checks.GRAD_TOL}")
    return 0


def cmd_oracle_check(cfg, out_dir):
    results = checks.run_oracle_checks()
    for name, count in results.items():
        print(f"{name}: {count} cases OK")
    return 0


COMMANDS = {
    "datagen": cmd_datagen,
    "train-teacher": cmd_train_teacher,
    "train-coarse": cmd_train_coarse,
    "train-student": cmd_train_student,
    "pseudo-label": cmd_pseudo_label,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prkit",
        description="tile-based residual depth refinement toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path config override")
    parser.add_argument("--out", default="runs/out", help="run output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        cfg = cfgmod.apply_overrides(cfg, args.overrides)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        echo_hash = cfgmod.write_echo(cfg, out_dir)
        handler = COMMANDS[args.command]
        if args.command == "eval":
            return handler(cfg, out_dir, echo_hash)
        return handler(cfg, out_dir)
    except ConfigError as exc:
        print(f"PRKIT-ERROR config: {exc}", file=sys.stderr)
        return 2
    except (IOFormatError, FileNotFoundError) as exc:
        print(f"PRKIT-ERROR io: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"PRKIT-ERROR numerical: {exc}", file=sys.stderr)
        return 4
    except CheckFailure as exc:
        print(f"PRKIT-ERROR check: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
