"""Three-way gradient verification: closed form vs autodiff vs finite differences.

The finite-difference route differentiates small numpy reference
implementations of each loss (in this module) with respect to the tempered
student logits ``u = z / T``, evaluated in extended precision
(``np.longdouble``) so that the ``h = 1e-5`` central difference is not
dominated by float64 roundoff on tiny components.  The reference AEKT keeps the student's
target confidence frozen at the unperturbed point, which is what the
stop-gradient means for a first derivative.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import oracles
from . import tensor as tn
from .losses import (DistillBatch, DistillConfig, aekt_loss, dkd_loss, kd_loss, nckd_loss,
                     tckd_loss, total_distill_loss)

FD_STEP = 1e-5
AUTODIFF_RTOL = 1e-8
FD_RTOL = 1e-4
REL_FLOOR = 1e-6
TEMPERATURES = (1.0, 2.0, 4.0)
FORMULAS = ("KD", "TCKD", "NCKD", "DKD", "AEKT", "AEKT_ABLATED", "TOTAL_DISTILL")


def rel_err(a, b, floor: float = REL_FLOOR) -> float:
    """Largest componentwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den))


@dataclass(frozen=True)
class Case:
    z_T: np.ndarray
    z_S: np.ndarray
    t: int
    T: float
    alpha: float
    beta: float
    gamma: float

    @property
    def C(self) -> int:
        return self.z_T.size

    def probs(self):
        return (oracles.probs_from_logits(self.z_T, self.T),
                oracles.probs_from_logits(self.z_S, self.T))


def random_case(rng: np.random.Generator, c_range=(2, 100), scale: float = math.sqrt(2.0)) -> Case:
    """Logits ~ N(0, 2) (variance 2), C uniform on ``c_range`` inclusive, T from {1, 2, 4}."""
    C = int(rng.integers(c_range[0], c_range[1] + 1))
    return Case(z_T=rng.normal(0.0, scale, C), z_S=rng.normal(0.0, scale, C),
                t=int(rng.integers(C)), T=float(rng.choice(TEMPERATURES)),
                alpha=float(rng.uniform(0.0, 2.0)), beta=float(rng.uniform(0.0, 8.0)),
                gamma=float(rng.uniform(0.0, 1.0)))


# -- numpy reference losses over rows of tempered student logits ------------------------

def _log_softmax_rows(U):
    m = U.max(axis=1, keepdims=True)
    return U - m - np.log(np.exp(U - m).sum(axis=1, keepdims=True))


def _ref_kd(U, q, t, case):
    return (q * (np.log(q) - _log_softmax_rows(U))).sum(axis=1)


def _wide(x):
    return np.asarray(x, dtype=np.longdouble)


def _logsumexp_rows(U):
    m = U.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(U - m).sum(axis=1, keepdims=True)))[:, 0]


def _binary_parts(U, t):
    lse = _logsumexp_rows(U)
    return U[:, t] - lse, _logsumexp_rows(np.delete(U, t, axis=1)) - lse


def _ref_tckd(U, q, t, case):
    lp_t, lp_nt = _binary_parts(U, t)
    q_t, q_nt = q[t], np.delete(q, t).sum()
    return q_t * (np.log(q_t) - lp_t) + q_nt * (np.log(q_nt) - lp_nt)


def _ref_nckd(U, q, t, case):
    if U.shape[1] == 2:
        return np.zeros(len(U))
    q_hat = np.delete(q, t)
    q_hat = q_hat / q_hat.sum()
    return (q_hat * (np.log(q_hat) - _log_softmax_rows(np.delete(U, t, axis=1)))).sum(axis=1)


def _ref_dkd(U, q, t, case):
    return case.alpha * _ref_tckd(U, q, t, case) + case.beta * _ref_nckd(U, q, t, case)


def _ref_aekt(U, q, t, case):
    frozen = _wide_probs(case.z_S, case.T)[t]
    factor = 1 - np.exp2(1 - q[t] / frozen)
    return (np.log(q[t]) - _log_softmax_rows(U)[:, t]) * factor


def _ref_total(U, q, t, case):
    return _ref_dkd(U, q, t, case) + case.gamma * _ref_aekt(U, q, t, case)


def central_difference(f: Callable[[np.ndarray], np.ndarray], u: np.ndarray,
                       h: float = FD_STEP) -> np.ndarray:
    """Gradient of scalar ``f`` at vector ``u``; ``f`` maps rows ``[M, C]`` to ``[M]``."""
    u = _wide(u)
    steps = np.eye(u.size, dtype=np.longdouble) * _wide(h)
    plus = f(u[None, :] + steps)
    minus = f(u[None, :] - steps)
    return ((plus - minus) / (2 * _wide(h))).astype(np.float64)


def _wide_probs(z, T):
    u = _wide(z) / _wide(T)
    e = np.exp(u - u.max())
    return e / e.sum()


# -- the three routes ------------------------------------------------------------------

def analytic_grad(name: str, case: Case) -> np.ndarray:
    p_T, p_S = case.probs()
    t = case.t
    if name == "KD":
        return oracles.grad_kd(p_T, p_S).values
    if name == "TCKD":
        return oracles.grad_tckd(p_T, p_S, t).values
    if name == "NCKD":
        return oracles.grad_nckd(p_T, p_S, t).values
    if name == "DKD":
        return oracles.grad_dkd(p_T, p_S, t, case.alpha, case.beta).values
    if name == "AEKT":
        return oracles.grad_aekt(p_T, p_S, t).values
    if name == "AEKT_ABLATED":
        return oracles.grad_aekt(p_T, p_S, t, ablate_target_confidence_term=True).values
    if name == "TOTAL_DISTILL":
        return oracles.grad_total_distill(p_T, p_S, t, case.alpha, case.beta, case.gamma).values
    raise KeyError(name)


def autodiff_grad(name: str, case: Case) -> np.ndarray:
    """Engine gradient wrt raw logits, mapped back to tempered-probability units."""
    tape = tn.Tape()
    z = tape.variable(case.z_S[None, :])
    batch = DistillBatch.simple(case.z_T[None, :], z, [case.t])
    cfg = DistillConfig(alpha=case.alpha, beta=case.beta, gamma=case.gamma,
                        temperature=case.T, ablate_target_confidence_term=name == "AEKT_ABLATED")
    T = case.T
    if name == "KD":
        loss = kd_loss(batch, T)
    elif name == "TCKD":
        loss = tckd_loss(batch, T)
    elif name == "NCKD":
        loss = nckd_loss(batch, T)
    elif name == "DKD":
        loss = dkd_loss(batch, cfg)
    elif name in ("AEKT", "AEKT_ABLATED"):
        loss = aekt_loss(batch, cfg)
    elif name == "TOTAL_DISTILL":
        loss = total_distill_loss(batch, cfg)
    else:
        raise KeyError(name)
    if loss.node_id is None:
        return np.zeros(case.C)
    tape.backward(loss)
    return tape.grad(z)[0] / T


_REFERENCES = {"KD": _ref_kd, "TCKD": _ref_tckd, "NCKD": _ref_nckd, "DKD": _ref_dkd,
               "AEKT": _ref_aekt, "TOTAL_DISTILL": _ref_total}


def fd_grad(name: str, case: Case, h: float = FD_STEP) -> Optional[np.ndarray]:
    """Finite-difference gradient wrt tempered logits; None where no forward function exists."""
    ref = _REFERENCES.get(name)
    if ref is None:
        return None
    q = _wide_probs(case.z_T, case.T)
    return central_difference(lambda U: ref(U, q, case.t, case), case.z_S / case.T, h)


# -- report ----------------------------------------------------------------------------

@dataclass
class FormulaResult:
    name: str
    cases: int = 0
    max_autodiff_err: float = 0.0
    max_fd_err: Optional[float] = None
    failures: int = 0

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.cases > 0


@dataclass
class VerificationReport:
    results: dict = field(default_factory=dict)
    cases: int = 0
    seed: int = 0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def failed_formulas(self) -> list[str]:
        return [n for n, r in self.results.items() if not r.passed]

    def to_text(self) -> str:
        lines = [f"gradient verification: {self.cases} cases, seed {self.seed}",
                 f"tolerances: analytic~autodiff rel {AUTODIFF_RTOL:g}, "
                 f"analytic~finite-difference rel {FD_RTOL:g} (h={FD_STEP:g})"]
        for r in self.results.values():
            fd = "n/a" if r.max_fd_err is None else f"{r.max_fd_err:.3e}"
            lines.append(f"{'PASS' if r.passed else 'FAIL'} {r.name:<14} "
                         f"max_autodiff_rel={r.max_autodiff_err:.3e} max_fd_rel={fd} "
                         f"failures={r.failures}")
        lines.append("ALL PASS" if self.passed else "FAILED: " + ", ".join(self.failed_formulas()))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["formula", "cases", "max_autodiff_rel_err", "max_fd_rel_err", "failures",
                    "passed"])
        for r in self.results.values():
            w.writerow([r.name, r.cases, repr(r.max_autodiff_err),
                        "" if r.max_fd_err is None else repr(r.max_fd_err), r.failures,
                        int(r.passed)])
        return buf.getvalue()


def run_verification(cases: int = 1000, seed: int = 0, formulas=FORMULAS,
                     analytic: Optional[Callable[[str, Case], np.ndarray]] = None,
                     ) -> VerificationReport:
    """Compare all three routes on ``cases`` random cases.

    ``analytic`` replaces the closed-form route (used for negative controls).
    """
    if cases < 1:
        raise ValueError("cases must be at least 1")
    analytic = analytic or analytic_grad
    rng = np.random.default_rng(seed)
    report = VerificationReport(results={n: FormulaResult(n) for n in formulas},
                                cases=cases, seed=seed)
    for _ in range(cases):
        case = random_case(rng)
        for name in formulas:
            res = report.results[name]
            a = analytic(name, case)
            e_ad = rel_err(a, autodiff_grad(name, case))
            fd = fd_grad(name, case)
            e_fd = None if fd is None else rel_err(a, fd)
            res.cases += 1
            res.max_autodiff_err = max(res.max_autodiff_err, e_ad)
            if e_fd is not None:
                res.max_fd_err = max(res.max_fd_err or 0.0, e_fd)
            if e_ad > AUTODIFF_RTOL or (e_fd is not None and e_fd > FD_RTOL):
                res.failures += 1
    return report
