"""Training loops: CE-only teacher/scratch training and teacher -> student distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as tn
from .data import Dataset
from .losses import (DistillBatch, DistillConfig, LossBreakdown, cross_entropy, kd_loss,
                     teacher_nontarget_mass, total_loss)
from .metrics import RunMetrics, top1_accuracy
from .models import Mlp, SerializationHead
from .optim import Schedule, SgdState, lr_at, warmup_factor
from .tensor import Tape

log = logging.getLogger(__name__)

METHODS = ("scratch", "kd", "dkd", "aekt")


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64


def effective_distill(method: str, cfg: DistillConfig) -> DistillConfig:
    """Weights actually used by ``method``.

    ``kd`` is alpha = 1, gamma = 0 with a per-sample NCKD weight equal to the
    teacher's non-target mass (see :func:`train_student`); ``dkd`` drops the
    AEKT term; ``scratch`` drops every distillation term.
    """
    if method == "scratch":
        return replace(cfg, alpha=0.0, beta=0.0, gamma=0.0)
    if method == "kd":
        return replace(cfg, alpha=1.0, beta=0.0, gamma=0.0)
    if method == "dkd":
        return replace(cfg, gamma=0.0)
    if method == "aekt":
        return cfg
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def build_head(cfg: DistillConfig, num_classes: int, seed: int) -> Optional[SerializationHead]:
    if cfg.serialization == "off":
        return None
    hidden = cfg.head_width if cfg.serialization == "two_layer" else None
    return SerializationHead(num_classes, hidden, cfg.head_nonlinear, seed)


def epoch_seed(shuffle_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([shuffle_seed, epoch]).generate_state(1)[0])


def _batch_indices(n: int, batch_size: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_student(student: Mlp, train: Dataset, test: Dataset, schedule: Schedule,
                  sgd: SgdConfig, distill: DistillConfig = DistillConfig(),
                  method: str = "scratch", teacher_train_logits: Optional[np.ndarray] = None,
                  head: Optional[SerializationHead] = None, shuffle_seed: int = 0,
                  kd_crosscheck: bool = False, kd_direct: bool = False) -> RunMetrics:
    """Train ``student`` (and ``head``) in place; returns per-epoch metrics.

    ``teacher_train_logits`` are the frozen teacher's logits for every training
    row.  With ``kd_crosscheck`` each step also records the direct
    KL(p^T || p^S) value next to the decomposed one actually optimized.
    ``kd_direct`` optimizes the direct KL instead (``kd`` only).
    """
    cfg = effective_distill(method, distill)
    if method != "scratch":
        if teacher_train_logits is None:
            raise ValueError(f"method {method!r} needs teacher logits")
        if teacher_train_logits.shape != (len(train), student.num_classes):
            raise ValueError("teacher logits do not match the training set / class count")
    state = SgdState(sgd.lr, sgd.momentum, sgd.weight_decay)
    metrics = RunMetrics()
    T = cfg.temperature
    for epoch in range(schedule.total_epochs):
        lr = lr_at(schedule, sgd.lr, epoch)
        wf = warmup_factor(replace(schedule, warmup_epochs=cfg.warmup_epochs), epoch)
        sums = np.zeros(5)
        steps = 0
        for idx in _batch_indices(len(train), sgd.batch_size, epoch_seed(shuffle_seed, epoch)):
            x, y = train.features[idx], train.labels[idx]
            tape = Tape()
            sp = student.bind(tape)
            hp = head.bind(tape) if head is not None else []
            z_class = student(x, sp)
            if method == "scratch":
                ce = cross_entropy(z_class, y)
                loss = ce * cfg.ce_weight
                bd = LossBreakdown(ce=ce.item(), tckd=0.0, nckd=0.0, aekt=0.0, distill=0.0,
                                   total=loss.item(), warmup=wf)
            else:
                z_distill = head(z_class, hp) if head is not None else z_class
                batch = DistillBatch(teacher_train_logits[idx], z_distill, z_class, y)
                if method == "kd" and kd_direct:
                    ce = cross_entropy(z_class, y)
                    kd = kd_loss(batch, T)
                    loss = ce * cfg.ce_weight + kd * wf
                    bd = LossBreakdown(ce=ce.item(), tckd=0.0, nckd=0.0, aekt=0.0,
                                       distill=kd.item(), total=loss.item(), warmup=wf)
                else:
                    beta = (teacher_nontarget_mass(batch.teacher_logits, y, T)
                            if method == "kd" else None)
                    loss, bd = total_loss(batch, cfg, wf, beta=beta)
                if kd_crosscheck:
                    metrics.step_trace.append((bd.distill, kd_loss(batch, T).item()))
            tape.backward(loss)
            params = student.params + (head.params if head is not None else [])
            grads = [tape.grad(p) for p in sp + hp]
            state.step(params, grads, lr)
            sums += (bd.ce, bd.tckd, bd.nckd, bd.aekt, bd.total)
            steps += 1
        sums /= steps
        acc = top1_accuracy(student.predict(test.features), test.labels)
        metrics.add_epoch(epoch=epoch, lr=lr, warmup=wf, ce=sums[0], tckd=sums[1],
                          nckd=sums[2], aekt=sums[3], total=sums[4], test_acc=acc)
        log.info("epoch %d lr %.4g warmup %.3f loss %.5f test_acc %.4f",
                 epoch, lr, wf, sums[4], acc)
    return metrics
