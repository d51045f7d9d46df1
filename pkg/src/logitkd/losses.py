"""Logit distillation losses built on :mod:`logitkd.tensor`.

All KD-family terms (KD, TCKD, NCKD, AEKT) are evaluated on softmax(z / T)
and multiplied by ``T**2``; cross-entropy always uses temperature 1 and the
pre-head (classification) logits.  Batch reduction is the row mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from . import tensor as tn
from .tensor import Tensor

Reduction = Literal["mean", "none"]
SERIALIZATION_KINDS = ("off", "linear", "two_layer")


@dataclass(frozen=True)
class DistillBatch:
    teacher_logits: Tensor
    student_distill_logits: Tensor
    student_class_logits: Tensor
    targets: np.ndarray

    def __post_init__(self):
        for name in ("teacher_logits", "student_distill_logits", "student_class_logits"):
            object.__setattr__(self, name, tn.as_tensor(getattr(self, name)))
        targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "targets", targets)
        shape = self.teacher_logits.shape
        if len(shape) != 2:
            raise tn.ShapeError(f"logits must be N x C, got {shape}")
        if self.student_distill_logits.shape != shape or self.student_class_logits.shape != shape:
            raise tn.ShapeError("teacher, distill and class logits must share one N x C shape")
        if targets.shape != (shape[0],):
            raise tn.ShapeError(f"expected {shape[0]} targets, got {targets.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= shape[1]):
            raise ValueError(f"targets must lie in [0, {shape[1]})")

    @classmethod
    def simple(cls, teacher_logits, student_logits, targets) -> "DistillBatch":
        """Batch without a serialization head: both student roles share one tensor."""
        s = tn.as_tensor(student_logits)
        return cls(tn.as_tensor(teacher_logits), s, s, targets)

    @property
    def num_classes(self) -> int:
        return self.teacher_logits.shape[1]

    def nontarget_mask(self) -> np.ndarray:
        mask = np.ones(self.teacher_logits.shape, dtype=bool)
        mask[np.arange(len(self.targets)), self.targets] = False
        return mask


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 8.0
    gamma: float = 0.5
    temperature: float = 4.0
    ce_weight: float = 1.0
    warmup_epochs: int = 20
    ablate_target_confidence_term: bool = False
    serialization: str = "off"
    head_width: Optional[int] = None
    head_nonlinear: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for name in ("alpha", "beta", "gamma", "ce_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.serialization not in SERIALIZATION_KINDS:
            raise ValueError(f"serialization must be one of {SERIALIZATION_KINDS}, "
                             f"got {self.serialization!r}")
        if self.serialization == "two_layer" and not (self.head_width and self.head_width > 0):
            raise ValueError("two_layer serialization needs a positive head_width")


@dataclass
class LossBreakdown:
    """Per-term values before weighting.

    When a per-sample NCKD weight is used, ``nckd`` holds the mean of the
    weighted rows and the effective scalar weight is 1.
    """

    ce: float
    tckd: float
    nckd: float
    aekt: float
    distill: float
    total: float
    warmup: float = 1.0
    extra: dict = field(default_factory=dict)


class _Side:
    """Probabilities of one model, split into target / non-target parts."""

    def __init__(self, logits: Tensor, targets: np.ndarray, mask: np.ndarray, T: float):
        self.logits = logits
        self.T = T
        self.mask = mask
        self.logp = tn.log_softmax(logits, T)
        self.p = tn.exp(self.logp)
        self.logp_t = tn.gather(self.logp, targets)
        self.p_t = tn.exp(self.logp_t)
        self._p_nt = None
        self._log_p_nt = None
        self._hat = None

    @property
    def p_nt(self) -> Tensor:
        if self._p_nt is None:
            self._p_nt = tn.clamp(tn.tsum(tn.masked_select(self.p, self.mask), axis=1))
        return self._p_nt

    @property
    def log_p_nt(self) -> Tensor:
        if self._log_p_nt is None:
            self._log_p_nt = tn.log(self.p_nt)
        return self._log_p_nt

    @property
    def log_hat(self) -> Tensor:
        """log of the re-normalized non-target distribution, ``[N, C-1]``."""
        if self._hat is None:
            self._hat = tn.log_softmax(tn.masked_select(self.logits, self.mask), self.T)
        return self._hat


class _Pair:
    def __init__(self, batch: DistillBatch, T: float):
        self.batch = batch
        self.T = T
        mask = batch.nontarget_mask()
        self.teacher = _Side(tn.detach(batch.teacher_logits), batch.targets, mask, T)
        self.student = _Side(batch.student_distill_logits, batch.targets, mask, T)

    def reduce(self, rows: Tensor, reduction: Reduction) -> Tensor:
        scaled = rows * (self.T * self.T)
        if reduction == "none":
            return scaled
        if reduction == "mean":
            return tn.mean(scaled)
        raise ValueError(f"unknown reduction {reduction!r}")


def _kd_rows(pair: _Pair) -> Tensor:
    t, s = pair.teacher, pair.student
    return tn.tsum(t.p * (t.logp - s.logp), axis=1)


def _tckd_rows(pair: _Pair) -> Tensor:
    t, s = pair.teacher, pair.student
    return t.p_t * (t.logp_t - s.logp_t) + t.p_nt * (t.log_p_nt - s.log_p_nt)


def _nckd_rows(pair: _Pair) -> Tensor:
    if pair.batch.num_classes < 3:
        # singleton non-target distribution: exactly 0, still on the student's tape
        logits = pair.batch.student_distill_logits
        return tn.custom_op("nckd_c2", np.zeros(len(pair.batch.targets)), (logits,),
                            lambda g: (np.zeros(logits.shape),))
    t, s = pair.teacher, pair.student
    return tn.tsum(tn.exp(t.log_hat) * (t.log_hat - s.log_hat), axis=1)


def _ablated_target_logprob(logits: Tensor, targets: np.ndarray, T: float) -> Tensor:
    """log p_t with the (1 - p_t) factor of its target-logit derivative replaced by 1."""
    logp = tn.log_softmax(tn.detach(logits), T).data
    rows = np.arange(len(targets))
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[rows, targets] = 1.0
    local = (onehot - p * (1.0 - onehot)) / T
    return tn.custom_op("ablated_target_logprob", logp[rows, targets], (logits,),
                        lambda g: (g[:, None] * local,))


def aekt_factor(p_t_teacher, p_t_student):
    """``1 - 2**(1 - r)`` with ``r = p_t^T / p_t^S``; lies in (-1, 1) and is 0 at r = 1."""
    ratio = np.asarray(p_t_teacher, dtype=np.float64) / np.maximum(p_t_student, tn.PROB_FLOOR)
    return 1.0 - np.exp2(1.0 - ratio)


def _aekt_rows(pair: _Pair, ablate: bool, detach_confidence: bool = True) -> Tensor:
    t, s = pair.teacher, pair.student
    confidence = tn.detach(s.p_t) if detach_confidence else s.p_t
    factor = 1.0 - tn.exp2(1.0 - t.p_t / tn.clamp(confidence))
    if ablate:
        logp_t = _ablated_target_logprob(pair.batch.student_distill_logits,
                                         pair.batch.targets, pair.T)
    else:
        logp_t = s.logp_t
    return (t.logp_t - logp_t) * factor


def cross_entropy(logits, targets, reduction: Reduction = "mean") -> Tensor:
    logits = tn.as_tensor(logits)
    rows = -tn.gather(tn.log_softmax(logits, 1.0), np.asarray(targets, dtype=np.int64))
    return rows if reduction == "none" else tn.mean(rows)


def kd_loss(batch: DistillBatch, temperature: float, reduction: Reduction = "mean") -> Tensor:
    """Classical KD: KL(p^T || p^S) at temperature T, times T**2."""
    pair = _Pair(batch, temperature)
    return pair.reduce(_kd_rows(pair), reduction)


def tckd_loss(batch: DistillBatch, temperature: float, reduction: Reduction = "mean") -> Tensor:
    """Binary KL between (p_t, p_not_t) of teacher and student."""
    pair = _Pair(batch, temperature)
    return pair.reduce(_tckd_rows(pair), reduction)


def nckd_loss(batch: DistillBatch, temperature: float, reduction: Reduction = "mean") -> Tensor:
    """KL between the teacher's and student's non-target distributions (0 when C = 2)."""
    pair = _Pair(batch, temperature)
    return pair.reduce(_nckd_rows(pair), reduction)


def teacher_nontarget_mass(teacher_logits, targets, temperature: float) -> np.ndarray:
    """Per-row p_not_t of the teacher; as an NCKD weight it turns DKD back into KD."""
    logits = np.asarray(tn.as_tensor(teacher_logits).data)
    batch = DistillBatch.simple(logits, logits, targets)
    side = _Side(Tensor(logits), batch.targets, batch.nontarget_mask(), temperature)
    return side.p_nt.data.copy()


def _beta_rows(beta, n: int):
    if beta is None or np.ndim(beta) == 0:
        return beta
    arr = np.asarray(beta, dtype=np.float64)
    if arr.shape != (n,):
        raise tn.ShapeError(f"per-sample beta must have shape ({n},), got {arr.shape}")
    return Tensor(arr)


def dkd_loss(batch: DistillBatch, cfg: DistillConfig, beta=None,
             reduction: Reduction = "mean") -> Tensor:
    """alpha * TCKD + beta * NCKD.

    ``beta`` overrides ``cfg.beta`` and may be a per-sample array.
    """
    pair = _Pair(batch, cfg.temperature)
    b = _beta_rows(cfg.beta if beta is None else beta, len(batch.targets))
    rows = _tckd_rows(pair) * cfg.alpha + _nckd_rows(pair) * b
    return pair.reduce(rows, reduction)


def aekt_loss(batch: DistillBatch, cfg: DistillConfig, reduction: Reduction = "mean",
              detach_confidence: bool = True) -> Tensor:
    """log(p_t^T / p_t^S) * (1 - 2**(1 - p_t^T / sg(p_t^S))), times T**2.

    ``sg`` is a stop-gradient.  ``detach_confidence=False`` lets gradient flow
    through the denominator too, which no longer gives the intended gradient;
    it exists only to demonstrate that difference.
    """
    pair = _Pair(batch, cfg.temperature)
    rows = _aekt_rows(pair, cfg.ablate_target_confidence_term, detach_confidence)
    return pair.reduce(rows, reduction)


def total_distill_loss(batch: DistillBatch, cfg: DistillConfig,
                       reduction: Reduction = "mean") -> Tensor:
    """alpha * TCKD + beta * NCKD + gamma * AEKT without CE or warm-up."""
    pair = _Pair(batch, cfg.temperature)
    rows = (_tckd_rows(pair) * cfg.alpha + _nckd_rows(pair) * cfg.beta
            + _aekt_rows(pair, cfg.ablate_target_confidence_term) * cfg.gamma)
    return pair.reduce(rows, reduction)


def total_loss(batch: DistillBatch, cfg: DistillConfig, warmup_factor: float = 1.0,
               beta=None) -> tuple[Tensor, LossBreakdown]:
    """ce_weight * CE + warmup * (alpha * TCKD + beta * NCKD + gamma * AEKT)."""
    if not 0.0 <= warmup_factor <= 1.0:
        raise ValueError(f"warmup_factor must lie in [0, 1], got {warmup_factor}")
    ce = cross_entropy(batch.student_class_logits, batch.targets)
    pair = _Pair(batch, cfg.temperature)
    tckd = pair.reduce(_tckd_rows(pair), "mean")
    aekt = pair.reduce(_aekt_rows(pair, cfg.ablate_target_confidence_term), "mean")
    if beta is None or np.ndim(beta) == 0:
        b = cfg.beta if beta is None else float(beta)
        nckd = pair.reduce(_nckd_rows(pair), "mean")
    else:
        b = 1.0
        nckd = pair.reduce(_nckd_rows(pair) * _beta_rows(beta, len(batch.targets)), "mean")
    distill = tckd * cfg.alpha + nckd * b + aekt * cfg.gamma
    total = ce * cfg.ce_weight + distill * warmup_factor
    breakdown = LossBreakdown(ce=ce.item(), tckd=tckd.item(), nckd=nckd.item(),
                              aekt=aekt.item(), distill=distill.item(), total=total.item(),
                              warmup=warmup_factor)
    return total, breakdown
