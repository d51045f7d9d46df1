"""Closed-form gradients of the distillation losses with respect to student logits.

Everything here works on plain probability vectors of one sample, already
computed at the distillation temperature, and shares no code with the
autodiff engine.  A gradient of a loss evaluated on ``softmax(z / T)`` and
scaled by ``T**2`` is ``T * g`` in the raw logits, where ``g`` is the value
returned here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
NORMALIZATION_TOL = 1e-9


class LossKind(enum.Enum):
    KD = "KD"
    TCKD = "TCKD"
    NCKD = "NCKD"
    DKD = "DKD"
    AEKT = "AEKT"
    TOTAL_DISTILL = "TOTAL_DISTILL"


class OracleContractError(ValueError):
    """Input is not a valid probability vector or target index."""


@dataclass(frozen=True)
class GradVector:
    values: np.ndarray
    loss_kind: LossKind
    clamped: bool = False

    def __len__(self):
        return len(self.values)

    def __add__(self, other: "GradVector") -> "GradVector":
        return GradVector(self.values + other.values, LossKind.TOTAL_DISTILL,
                          self.clamped or other.clamped)

    def scaled(self, k: float) -> "GradVector":
        return GradVector(self.values * k, self.loss_kind, self.clamped)


def probs_from_logits(z, temperature: float = 1.0) -> np.ndarray:
    """Softmax using exact (fsum) accumulation, independent of the engine's reduction order."""
    u = [float(v) / temperature for v in z]
    top = max(u)
    e = [math.exp(v - top) for v in u]
    total = math.fsum(e)
    return np.array([v / total for v in e])


def _check_probs(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise OracleContractError(f"{name} must be a probability vector with C >= 2")
    if np.any(p < 0) or abs(math.fsum(p) - 1.0) > NORMALIZATION_TOL:
        raise OracleContractError(f"{name} is not normalized (sum={math.fsum(p)!r})")
    return p


def _check(p_T, p_S, t=None):
    p_T = _check_probs(p_T, "p_T")
    p_S = _check_probs(p_S, "p_S")
    if p_T.shape != p_S.shape:
        raise OracleContractError("p_T and p_S lengths differ")
    if t is not None and not 0 <= t < p_T.size:
        raise OracleContractError(f"target {t} out of range for C={p_T.size}")
    return p_T, p_S


def _nontarget_mass(p, t):
    m = math.fsum(np.delete(p, t))
    return max(m, PROB_FLOOR), m < PROB_FLOOR


def grad_kd(p_T, p_S) -> GradVector:
    p_T, p_S = _check(p_T, p_S)
    return GradVector(p_S - p_T, LossKind.KD)


def grad_tckd(p_T, p_S, t: int) -> GradVector:
    p_T, p_S = _check(p_T, p_S, t)
    nt_T, c1 = _nontarget_mass(p_T, t)
    nt_S, c2 = _nontarget_mass(p_S, t)
    g = (1.0 - nt_T / nt_S) * p_S
    g[t] = p_S[t] - p_T[t]
    return GradVector(g, LossKind.TCKD, c1 or c2)


def grad_nckd(p_T, p_S, t: int) -> GradVector:
    p_T, p_S = _check(p_T, p_S, t)
    if p_T.size == 2:
        return GradVector(np.zeros(2), LossKind.NCKD)
    nt_T, c1 = _nontarget_mass(p_T, t)
    nt_S, c2 = _nontarget_mass(p_S, t)
    g = p_S / nt_S - p_T / nt_T
    g[t] = 0.0
    return GradVector(g, LossKind.NCKD, c1 or c2)


def grad_dkd(p_T, p_S, t: int, alpha: float, beta: float) -> GradVector:
    p_T, p_S = _check(p_T, p_S, t)
    nt_T, c1 = _nontarget_mass(p_T, t)
    nt_S, c2 = _nontarget_mass(p_S, t)
    if p_T.size == 2:
        g = alpha * (1.0 - nt_T / nt_S) * p_S
    else:
        g = (alpha * (1.0 - nt_T / nt_S) + beta / nt_S) * p_S - (beta / nt_T) * p_T
    g[t] = alpha * (p_S[t] - p_T[t])
    return GradVector(g, LossKind.DKD, c1 or c2)


def confidence_factor(p_t_T: float, p_t_S: float) -> float:
    """``1 - 2**(1 - p_t^T / p_t^S)``."""
    return 1.0 - 2.0 ** (1.0 - p_t_T / max(p_t_S, PROB_FLOOR))


def grad_aekt(p_T, p_S, t: int, ablate_target_confidence_term: bool = False) -> GradVector:
    p_T, p_S = _check(p_T, p_S, t)
    f = confidence_factor(p_T[t], p_S[t])
    g = f * p_S
    g[t] = -f if ablate_target_confidence_term else -(1.0 - p_S[t]) * f
    return GradVector(g, LossKind.AEKT, p_S[t] < PROB_FLOOR)


def grad_total_distill(p_T, p_S, t: int, alpha: float, beta: float, gamma: float,
                       ablate: bool = False) -> GradVector:
    """alpha * TCKD + beta * NCKD + gamma * AEKT gradients, summed componentwise."""
    total = (grad_tckd(p_T, p_S, t).scaled(alpha) + grad_nckd(p_T, p_S, t).scaled(beta)
             + grad_aekt(p_T, p_S, t, ablate).scaled(gamma))
    return GradVector(total.values, LossKind.TOTAL_DISTILL, total.clamped)


def softmax_jacobian(p) -> np.ndarray:
    """``J[k, i] = d p_k / d z_i``: ``p_i - p_i**2`` on the diagonal, ``-p_k p_i`` off it."""
    p = _check_probs(p, "p")
    return np.diag(p) - np.outer(p, p)
