"""Accuracy and teacher-student similarity metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

METRICS_COLUMNS = ("epoch", "lr", "warmup", "ce", "tckd", "nckd", "aekt", "total", "test_acc")


def predictions(logits) -> np.ndarray:
    """Row argmax; ties go to the lowest index (numpy's argmax already does this)."""
    return np.argmax(np.asarray(logits), axis=1)


def top1_accuracy(logits, labels) -> float:
    return float(np.mean(predictions(logits) == np.asarray(labels)))


def prediction_agreement(logits_T, logits_S) -> float:
    return float(np.mean(predictions(logits_T) == predictions(logits_S)))


def cosine_similarity(p_T, p_S) -> float:
    """Mean over rows of the cosine between the two probability vectors."""
    p_T, p_S = np.asarray(p_T, dtype=np.float64), np.asarray(p_S, dtype=np.float64)
    num = np.sum(p_T * p_S, axis=1)
    den = np.linalg.norm(p_T, axis=1) * np.linalg.norm(p_S, axis=1)
    return float(np.mean(num / np.maximum(den, 1e-300)))


def softmax_rows(logits, temperature: float = 1.0) -> np.ndarray:
    u = np.asarray(logits, dtype=np.float64) / temperature
    e = np.exp(u - u.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def similarity(teacher_logits, student_logits) -> dict:
    """Cosine similarity and agreement at temperature 1 on inference logits."""
    return {"cosine_similarity": cosine_similarity(softmax_rows(teacher_logits),
                                                   softmax_rows(student_logits)),
            "agreement": prediction_agreement(teacher_logits, student_logits),
            "samples": len(teacher_logits)}


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    step_trace: list = field(default_factory=list)

    def add_epoch(self, **row) -> None:
        self.epochs.append({k: row[k] for k in METRICS_COLUMNS})

    def column(self, name: str) -> list:
        return [row[name] for row in self.epochs]

    @property
    def final_test_acc(self) -> float:
        return self.epochs[-1]["test_acc"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for row in self.epochs:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRICS_COLUMNS[1:]])
        return buf.getvalue()

    def summary_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.final.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
