"""Command-line entry point: ``logitkd <command> [options]``.

Exit status: 0 success, 2 configuration error, 3 I/O error, 4 gradient
verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import PRESETS, ConfigError, RunConfig, load_config
from .data import IdxError
from .metrics import similarity
from .models import CheckpointError, load_model
from .verify import FORMULAS, analytic_grad, run_verification

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VERIFY = 0, 2, 3, 4


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.epochs is not None:
        cfg = cfg.with_overrides(**{"schedule.total_epochs": args.epochs})
    if getattr(args, "method", None):
        cfg = cfg.with_overrides(**{"run.method": args.method})
    if getattr(args, "teacher", None):
        cfg = cfg.with_overrides(**{"run.teacher_checkpoint": args.teacher})
    if args.out is not None:
        cfg = cfg.with_overrides(**{"run.out_dir": args.out})
    return cfg


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args)
    train, test = cfg.load_data()
    run = ex.train_teacher(cfg, train, test)
    ex.write_run_dir(cfg.out_dir, cfg, run.metrics, run.model)
    print(run.metrics.summary_text(), end="")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _resolve(args)
    train, test = cfg.load_data()
    teacher = ex.load_teacher(cfg, train, test)
    if not cfg["run.teacher_checkpoint"]:
        ex.write_run_dir(cfg.out_dir / "teacher", cfg, teacher.metrics, teacher.model)
    run = ex.distill(cfg, teacher, train, test)
    ex.write_run_dir(cfg.out_dir, cfg, run.metrics, run.model, run.head)
    print(run.metrics.summary_text(), end="")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def cmd_verify_grads(args) -> int:
    analytic = None
    if args.corrupt:
        # Negative control: flip the sign of one analytic formula.
        bad = args.corrupt

        def analytic(name, case):
            g = analytic_grad(name, case)
            return -g if name == bad else g

    report = run_verification(cases=args.cases, seed=args.seed if args.seed is not None else 0,
                              analytic=analytic)
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_report.txt").write_text(report.to_text())
        (out / "verify_report.csv").write_text(report.to_csv())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    train, test = cfg.load_data()
    teacher = ex.load_teacher(cfg, train, test)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    grids = list(ex.ABLATIONS) if args.grid == "all" else [args.grid]
    for name in grids:
        table, _ = ex.ABLATIONS[name](cfg, teacher, train, test)
        path = out / f"ablation_{name}.csv"
        path.write_text(table)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval_similarity(args) -> int:
    cfg = _resolve(args)
    _, test = cfg.load_data()
    teacher, _, _ = load_model(args.teacher_ckpt)
    student, _, _ = load_model(args.student_ckpt)
    for role, m in (("teacher", teacher), ("student", student)):
        if m.num_classes != cfg.num_classes:
            raise ConfigError(f"{role} checkpoint has {m.num_classes} classes, "
                              f"config has {cfg.num_classes}")
        if m.layer_dims[0] != test.dim:
            raise ConfigError(f"{role} checkpoint expects {m.layer_dims[0]} inputs, "
                              f"data has {test.dim}")
    sim = similarity(teacher.predict(test.features), student.predict(test.features))
    for key, value in sim.items():
        print(f"{key} = {value!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logitkd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=True):
        if need_config:
            sp.add_argument("--config", help="flat dotted-key TOML run configuration")
            sp.add_argument("--preset", choices=sorted(PRESETS),
                            help="preset supplying defaults (default: desk)")
            sp.add_argument("--epochs", type=int, help="override schedule.total_epochs")
        sp.add_argument("--seed", type=int, help="override the data, init and shuffle seeds")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train-teacher", help="train the teacher with cross-entropy only")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="train a student against a frozen teacher")
    common(sp)
    sp.add_argument("--method", choices=("scratch", "kd", "dkd", "aekt"))
    sp.add_argument("--teacher", help="teacher checkpoint (default: train one first)")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("verify-grads", help="analytic / autodiff / finite-difference check")
    common(sp, need_config=False)
    sp.add_argument("--cases", type=int, default=1000)
    sp.add_argument("--corrupt", choices=FORMULAS, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify_grads)

    sp = sub.add_parser("ablate", help="hyperparameter, head-variant and target-term ablations")
    common(sp)
    sp.add_argument("--teacher", help="teacher checkpoint (default: train one first)")
    sp.add_argument("--grid", choices=("all", *ex.ABLATIONS), default="all")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval-similarity", help="teacher-student cosine similarity and agreement")
    common(sp)
    sp.add_argument("teacher_ckpt")
    sp.add_argument("student_ckpt")
    sp.set_defaults(func=cmd_eval_similarity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "cases", 1) < 1:
        print("error: --cases must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, IdxError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
