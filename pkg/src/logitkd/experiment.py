"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig
from .data import Dataset
from .losses import DistillConfig
from .metrics import RunMetrics, similarity
from .models import Mlp, SerializationHead, export_head_weights, load_model, save_model
from .train import build_head, train_student

log = logging.getLogger(__name__)

# Offsets that keep teacher, student and head on distinct RNG streams.
TEACHER_STREAM, STUDENT_STREAM, HEAD_STREAM = 0, 1, 2


@dataclass
class TeacherRun:
    model: Mlp
    metrics: RunMetrics
    train_logits: np.ndarray
    test_logits: np.ndarray


@dataclass
class StudentRun:
    model: Mlp
    head: Optional[SerializationHead]
    metrics: RunMetrics
    summary: dict


def train_teacher(cfg: RunConfig, train: Dataset, test: Dataset) -> TeacherRun:
    teacher = Mlp(cfg.teacher_dims(train.dim), cfg["seed.init"] + TEACHER_STREAM)
    metrics = train_student(teacher, train, test, cfg.schedule(), cfg.sgd(), method="scratch",
                            shuffle_seed=cfg["seed.shuffle"] + TEACHER_STREAM)
    metrics.final = {"test_acc": metrics.final_test_acc,
                     "num_parameters": teacher.num_parameters()}
    return TeacherRun(teacher, metrics, teacher.predict(train.features),
                      teacher.predict(test.features))


def teacher_from_model(model: Mlp, train: Dataset, test: Dataset, num_classes: int) -> TeacherRun:
    if model.num_classes != num_classes:
        raise ConfigError(f"teacher checkpoint has {model.num_classes} classes, "
                          f"config has {num_classes}")
    if model.layer_dims[0] != train.dim:
        raise ConfigError(f"teacher checkpoint expects {model.layer_dims[0]} inputs, "
                          f"data has {train.dim}")
    return TeacherRun(model, RunMetrics(), model.predict(train.features),
                      model.predict(test.features))


def distill(cfg: RunConfig, teacher: TeacherRun, train: Dataset, test: Dataset,
            method: Optional[str] = None, distill_cfg: Optional[DistillConfig] = None,
            kd_crosscheck: bool = False) -> StudentRun:
    """One student run against a frozen teacher."""
    method = method or cfg.method
    dcfg = distill_cfg or cfg.distill_config()
    student = Mlp(cfg.student_dims(train.dim), cfg["seed.init"] + STUDENT_STREAM)
    head = build_head(dcfg, cfg.num_classes, cfg["seed.init"] + HEAD_STREAM) \
        if method != "scratch" else None
    metrics = train_student(student, train, test, cfg.schedule(), cfg.sgd(), dcfg, method,
                            None if method == "scratch" else teacher.train_logits, head,
                            cfg["seed.shuffle"] + STUDENT_STREAM, kd_crosscheck=kd_crosscheck)
    sim = similarity(teacher.test_logits, student.predict(test.features))
    summary = {"method": method, "test_acc": metrics.final_test_acc,
               "cosine_similarity": sim["cosine_similarity"], "agreement": sim["agreement"],
               "samples": sim["samples"]}
    if head is not None and head.hidden is None and not head.nonlinear:
        summary["head_diagonal_dominance"] = export_head_weights(head).diagonal_dominance
    metrics.final = summary
    return StudentRun(student, head, metrics, summary)


# -- persistence ------------------------------------------------------------------------

def write_run_dir(out: Path, cfg: RunConfig, metrics: RunMetrics, model: Mlp,
                  head: Optional[SerializationHead] = None) -> None:
    """Config snapshot, metrics CSV, checkpoint, summary and (linear head) weight exports."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    (out / "metrics.csv").write_text(metrics.to_csv())
    save_model(out / "model.ckpt", model, head, epoch=len(metrics.epochs))
    (out / "summary.txt").write_text(metrics.summary_text())
    if head is not None and head.hidden is None and not head.nonlinear:
        export = export_head_weights(head)
        (out / "head_weights.csv").write_text(export.weights_csv())
        (out / "head_top.csv").write_text(export.top_csv())


def load_teacher(cfg: RunConfig, train: Dataset, test: Dataset) -> TeacherRun:
    """The checkpoint named in ``run.teacher_checkpoint``, else a fresh CE-trained teacher."""
    path = cfg["run.teacher_checkpoint"]
    if path:
        model, _, _ = load_model(path)
        return teacher_from_model(model, train, test, cfg.num_classes)
    return train_teacher(cfg, train, test)


# -- ablations --------------------------------------------------------------------------

# Loss-term grid: which of (alpha, beta, gamma) stay on.
LOSS_TERM_CELLS = (
    ("all", (1, 1, 1)),
    ("(1) alpha+beta", (1, 1, 0)),
    ("(2) alpha+gamma", (1, 0, 1)),
    ("(3) beta+gamma", (0, 1, 1)),
    ("(4) alpha", (1, 0, 0)),
    ("(5) beta", (0, 1, 0)),
    ("(6) gamma", (0, 0, 1)),
    ("base", (0, 0, 0)),
)

# Head shapes: hidden width as a function of C (None = single C x C layer).
HEAD_SHAPES = (
    ("C-C", None),
    ("C-C-C", lambda C: C),
    ("C-2C-C", lambda C: 2 * C),
    ("C-C/2-C", lambda C: max(C // 2, 1)),
)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def ablate_loss_terms(cfg: RunConfig, teacher: TeacherRun, train, test) -> tuple[str, list[StudentRun]]:
    base = cfg.distill_config()
    runs, rows = [], []
    for label, (a, b, g) in LOSS_TERM_CELLS:
        dcfg = replace(base, alpha=base.alpha * a, beta=base.beta * b, gamma=base.gamma * g)
        run = distill(cfg, teacher, train, test, "aekt", dcfg)
        runs.append(run)
        rows.append([label, _fmt(dcfg.alpha), _fmt(dcfg.beta), _fmt(dcfg.gamma),
                     _fmt(run.summary["test_acc"]), _fmt(run.summary["cosine_similarity"]),
                     _fmt(run.summary["agreement"])])
    header = ["cell", "alpha", "beta", "gamma", "test_acc", "cosine_similarity", "agreement"]
    return _csv(header, rows), runs


def ablate_head_variants(cfg: RunConfig, teacher: TeacherRun, train, test) -> tuple[str, list[StudentRun]]:
    base = cfg.distill_config()
    C = cfg.num_classes
    runs, rows = [], []
    for nonlinear in (False, True):
        for label, width in HEAD_SHAPES:
            if width is None:
                dcfg = replace(base, serialization="linear", head_width=None,
                               head_nonlinear=nonlinear)
            else:
                dcfg = replace(base, serialization="two_layer", head_width=width(C),
                               head_nonlinear=nonlinear)
            run = distill(cfg, teacher, train, test, "aekt", dcfg)
            runs.append(run)
            rows.append([label, "nonlinear" if nonlinear else "linear", run.head.describe(),
                         _fmt(run.summary["test_acc"])])
    return _csv(["structure", "activation", "variant", "test_acc"], rows), runs


def ablate_target_term(cfg: RunConfig, teacher: TeacherRun, train, test) -> tuple[str, list[StudentRun]]:
    """Per-epoch accuracy with and without the (1 - p_t^S) factor on the AEKT target gradient."""
    base = cfg.distill_config()
    runs = [distill(cfg, teacher, train, test, "aekt",
                    replace(base, ablate_target_confidence_term=flag)) for flag in (False, True)]
    rows = []
    for tag, run in zip(("with_1_minus_pt", "without_1_minus_pt"), runs):
        for row in run.metrics.epochs:
            rows.append([tag, row["epoch"], _fmt(row["test_acc"]), _fmt(row["total"])])
    return _csv(["variant", "epoch", "test_acc", "total"], rows), runs


ABLATIONS = {"loss_terms": ablate_loss_terms, "head_variants": ablate_head_variants, "target_term": ablate_target_term}
