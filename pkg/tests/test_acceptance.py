"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary
(see ``conftest.py``).  Run alone with ``pytest tests/test_acceptance.py``.
"""

import functools
import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np

from logitkd import cli
from logitkd import experiment as ex
from logitkd import losses as L
from logitkd import oracles as O
from logitkd.config import from_preset
from logitkd.data import (IdxConsistencyError, IdxFormatError, IdxLengthError, read_idx,
                          write_idx)
from logitkd.losses import DistillBatch, DistillConfig
from logitkd.models import Mlp, SerializationHead, load_model, save_model
from logitkd.tensor import Tape
from logitkd.verify import run_verification

RESULTS: list[str] = []
DESK_SEEDS = (1, 2, 3)


@contextmanager
def criterion(number: int, title: str):
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException:
        RESULTS.append(f"FAIL criterion {number:>2} {title}: {_fmt(detail, start)}")
        raise
    RESULTS.append(f"PASS criterion {number:>2} {title}: {_fmt(detail, start)}")


def _fmt(detail: dict, start: float) -> str:
    parts = [f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items()]
    parts.append(f"time={time.perf_counter() - start:.1f}s")
    return ", ".join(parts)


def random_cases(seed: int, n: int = 1000):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        C = int(rng.integers(2, 101))
        yield (rng.normal(0, math.sqrt(2), C), rng.normal(0, math.sqrt(2), C),
               int(rng.integers(C)), float(rng.choice([1.0, 2.0, 4.0])))


# -- shared desk-scale runs ---------------------------------------------------------

@functools.lru_cache(maxsize=None)
def desk_data(seed: int):
    cfg = from_preset("desk").with_seed(seed)
    train, test = cfg.load_data()
    return cfg, train, test


@functools.lru_cache(maxsize=None)
def desk_teacher(seed: int):
    cfg, train, test = desk_data(seed)
    return ex.train_teacher(cfg, train, test)


@functools.lru_cache(maxsize=None)
def desk_run(seed: int, method: str):
    cfg, train, test = desk_data(seed)
    return ex.distill(cfg, desk_teacher(seed), train, test, method,
                      kd_crosscheck=(method == "kd"))


# -- 1 -------------------------------------------------------------------------------

def test_criterion_01_decomposition_identity():
    with criterion(1, "KD = TCKD + p_nt^T * NCKD per sample") as d:
        start = time.perf_counter()
        worst = 0.0
        for z_T, z_S, t, T in random_cases(101):
            b = DistillBatch.simple(z_T[None], z_S[None], [t])
            kd = L.kd_loss(b, T, "none").data[0]
            tckd = L.tckd_loss(b, T, "none").data[0]
            nckd = L.nckd_loss(b, T, "none").data[0]
            w = L.teacher_nontarget_mass(z_T[None], [t], T)[0]
            worst = max(worst, abs(kd - (tckd + w * nckd)) / (T * T))
        elapsed = time.perf_counter() - start
        d.update(cases=1000, max_abs_err=worst)
        assert worst <= 1e-10
        assert elapsed < 5.0


# -- 2 -------------------------------------------------------------------------------

def test_criterion_02_gradient_oracle_suite():
    with criterion(2, "analytic vs autodiff (1e-8) vs finite difference (1e-4)") as d:
        start = time.perf_counter()
        report = run_verification(cases=1000, seed=0)
        elapsed = time.perf_counter() - start
        d["max_autodiff_rel"] = max(r.max_autodiff_err for r in report.results.values())
        fd = [r.max_fd_err for r in report.results.values() if r.max_fd_err is not None]
        d["max_fd_rel"] = max(fd)
        d["failed"] = ",".join(report.failed_formulas()) or "none"
        for name in ("KD", "TCKD", "NCKD", "DKD", "AEKT", "TOTAL_DISTILL"):
            assert report.results[name].passed, name
            assert report.results[name].cases == 1000
        assert elapsed < 60.0


# -- 3 -------------------------------------------------------------------------------

def _autodiff_grads(z_T, z_S, t, T):
    out = {}
    cfg = DistillConfig(alpha=1.0, beta=8.0, gamma=0.5, temperature=T)
    fns = {"kd": lambda b: L.kd_loss(b, T), "tckd": lambda b: L.tckd_loss(b, T),
           "nckd": lambda b: L.nckd_loss(b, T), "dkd": lambda b: L.dkd_loss(b, cfg),
           "aekt": lambda b: L.aekt_loss(b, cfg), "total": lambda b: L.total_distill_loss(b, cfg)}
    for name, fn in fns.items():
        tape = Tape()
        zs = tape.variable(z_S[None])
        tape.backward(fn(DistillBatch.simple(z_T[None], zs, [t])))
        out[name] = tape.grad(zs)[0]
    return out


def test_criterion_03_structural_gradient_facts():
    with criterion(3, "NCKD target grad = 0, gradients sum to 0, AEKT factor shape") as d:
        worst_sum = 0.0
        for z_T, z_S, t, T in random_cases(303, 300):
            p_T, p_S = O.probs_from_logits(z_T, T), O.probs_from_logits(z_S, T)
            assert O.grad_nckd(p_T, p_S, t).values[t] == 0.0
            ad = _autodiff_grads(z_T, z_S, t, T)
            assert ad["nckd"][t] == 0.0
            oracle = [O.grad_kd(p_T, p_S), O.grad_tckd(p_T, p_S, t), O.grad_nckd(p_T, p_S, t),
                      O.grad_dkd(p_T, p_S, t, 1.0, 8.0), O.grad_aekt(p_T, p_S, t),
                      O.grad_total_distill(p_T, p_S, t, 1.0, 8.0, 0.5)]
            for g in [o.values for o in oracle] + list(ad.values()):
                worst_sum = max(worst_sum, abs(math.fsum(g)))
        d["max_abs_sum"] = worst_sum
        assert worst_sum <= 1e-10
        assert O.confidence_factor(0.37, 0.37) == 0.0
        r = np.concatenate([np.logspace(-9, 0, 300)[:-1], np.linspace(1.0, 50.0, 500)])
        f = L.aekt_factor(r, np.ones_like(r))
        assert np.all((f > -1.0) & (f < 1.0))
        assert np.all(np.diff(f) > 0)
        d["factor_range"] = f"({f.min():.6f}, {f.max():.6f})"


# -- 4 -------------------------------------------------------------------------------

def _aekt_target_grad(z_T, z_S, t, T, detach):
    tape = Tape()
    zs = tape.variable(z_S[None])
    cfg = DistillConfig(temperature=T)
    tape.backward(L.aekt_loss(DistillBatch.simple(z_T[None], zs, [t]), cfg,
                              detach_confidence=detach))
    return tape.grad(zs)[0][t] / T


def test_criterion_04_detach_correctness():
    with criterion(4, "stop-gradient reproduces the AEKT target gradient") as d:
        worst_detached, deviations = 0.0, []
        for z_T, z_S, t, T in random_cases(404, 500):
            p_T, p_S = O.probs_from_logits(z_T, T), O.probs_from_logits(z_S, T)
            expected = O.grad_aekt(p_T, p_S, t).values[t]
            worst_detached = max(worst_detached, abs(_aekt_target_grad(z_T, z_S, t, T, True) - expected))
            deviations.append(abs(_aekt_target_grad(z_T, z_S, t, T, False) - expected))
        d["detached_max_err"] = worst_detached
        d["undetached_max_dev"] = max(deviations)
        d["undetached_cases_over_1e-3"] = f"{np.mean(np.array(deviations) > 1e-3):.0%}"
        assert worst_detached <= 1e-10
        assert max(deviations) > 1e-3


# -- 5 -------------------------------------------------------------------------------

def test_criterion_05_kd_via_decomposition_at_training_time():
    with criterion(5, "per-sample beta DKD loss trace = direct KD loss trace") as d:
        run = desk_run(DESK_SEEDS[0], "kd")
        trace = np.array(run.metrics.step_trace)
        diff = np.abs(trace[:, 0] - trace[:, 1])
        d.update(steps=len(trace), max_abs_diff=float(diff.max()))
        cfg, train, _ = desk_data(DESK_SEEDS[0])
        expected_steps = cfg["schedule.total_epochs"] * math.ceil(len(train) / cfg["optim.batch_size"])
        assert len(trace) == expected_steps
        assert diff.max() <= 1e-9


# -- 6 -------------------------------------------------------------------------------

def test_criterion_06_serialization_head(tmp_path):
    with criterion(6, "identity head is a no-op at step 0, inference ignores it, W-weighted grad") as d:
        cfg, train, test = desk_data(DESK_SEEDS[0])
        teacher_logits = desk_teacher(DESK_SEEDS[0]).train_logits
        dcfg = cfg.distill_config()
        student = Mlp(cfg.student_dims(train.dim), 11)
        x, y, zt = train.features[:64], train.labels[:64], teacher_logits[:64]
        zc = student(x)
        head = SerializationHead(cfg.num_classes)
        with_head, _ = L.total_loss(DistillBatch(zt, head(zc), zc, y), dcfg)
        without, _ = L.total_loss(DistillBatch.simple(zt, zc, y), dcfg)
        d["step0_diff"] = abs(with_head.item() - without.item())
        assert d["step0_diff"] <= 1e-12

        # a trained head never touches inference: the checkpoint with and without it
        # yields byte-identical student logits
        small = ex.distill(cfg.with_overrides(**{"schedule.total_epochs": 2}),
                           desk_teacher(DESK_SEEDS[0]), train, test, "aekt",
                           replace(dcfg, serialization="linear"))
        assert not np.allclose(small.head.params[0], np.eye(cfg.num_classes))
        a, b = tmp_path / "with_head.ckpt", tmp_path / "without_head.ckpt"
        save_model(a, small.model, small.head)
        save_model(b, small.model, None)
        la, lb = load_model(a)[0].predict(test.features), load_model(b)[0].predict(test.features)
        assert la.tobytes() == lb.tobytes() == small.model.predict(test.features).tobytes()

        rng = np.random.default_rng(606)
        worst = 0.0
        C = cfg.num_classes
        for _ in range(200):
            W = rng.normal(size=(C, C))
            z = rng.normal(size=(1, C))
            zt_row = rng.normal(size=(1, C))
            t = [int(rng.integers(C))]
            h = SerializationHead(C)
            h.params[0] = W
            tape = Tape()
            zc_t = tape.variable(z)
            hp = h.bind(tape)
            zd = h(zc_t, hp)
            # gradient reaching the distillation logits ...
            loss = L.total_distill_loss(DistillBatch(zt_row, zd, zc_t, t), dcfg)
            tape.backward(loss)
            g_zd = tape.grad(zd)[0]
            # ... comes back to the classification logits as the W-weighted sum
            expected = W @ g_zd
            worst = max(worst, float(np.max(np.abs(tape.grad(zc_t)[0] - expected))))
        d["head_grad_max_err"] = worst
        assert worst <= 1e-10


# -- 7 -------------------------------------------------------------------------------

def test_criterion_07_desk_distillation_trend():
    with criterion(7, "AEKT >= scratch + 0.5pp, >= KD - 0.2pp, similarity >= KD") as d:
        start = time.perf_counter()
        acc = {m: [] for m in ("scratch", "kd", "aekt")}
        cos = {m: [] for m in ("kd", "aekt")}
        agr = {m: [] for m in ("kd", "aekt")}
        teacher_acc = []
        for seed in DESK_SEEDS:
            teacher_acc.append(desk_teacher(seed).metrics.final_test_acc)
            for m in acc:
                s = desk_run(seed, m).summary
                acc[m].append(s["test_acc"])
                if m in cos:
                    cos[m].append(s["cosine_similarity"])
                    agr[m].append(s["agreement"])
        mean = {m: 100 * float(np.mean(v)) for m, v in acc.items()}
        d.update(teacher=100 * float(np.mean(teacher_acc)), scratch=mean["scratch"],
                 kd=mean["kd"], aekt=mean["aekt"],
                 cos_kd=float(np.mean(cos["kd"])), cos_aekt=float(np.mean(cos["aekt"])),
                 agr_kd=float(np.mean(agr["kd"])), agr_aekt=float(np.mean(agr["aekt"])))
        elapsed = time.perf_counter() - start
        assert np.mean(teacher_acc) > np.mean(acc["scratch"])
        assert mean["aekt"] >= mean["scratch"] + 0.5
        assert mean["aekt"] >= mean["kd"] - 0.2
        assert d["cos_aekt"] >= d["cos_kd"]
        assert d["agr_aekt"] >= d["agr_kd"]
        assert elapsed < 600.0


# -- 8 -------------------------------------------------------------------------------

def test_criterion_08_ablation_harness():
    with criterion(8, "8-row hyperparameter grid, all-off cell = scratch, target-term pair differs") as d:
        seed = DESK_SEEDS[0]
        cfg, train, test = desk_data(seed)
        teacher = desk_teacher(seed)
        table, runs = ex.ablate_loss_terms(cfg, teacher, train, test)
        lines = table.strip().splitlines()
        labels = [l.split(",")[0] for l in lines[1:]]
        d["rows"] = len(labels)
        assert len(labels) == 8 and len(set(labels)) == 8
        base = runs[labels.index("base")]
        scratch = desk_run(seed, "scratch")
        for col in ("ce", "total", "test_acc"):
            assert base.metrics.column(col) == scratch.metrics.column(col), col
        for p, q in zip(base.model.params, scratch.model.params):
            assert p.tobytes() == q.tobytes()
        pair_csv, pair = ex.ablate_target_term(cfg, teacher, train, test)
        with_term = pair[0].metrics.column("total")
        without_term = pair[1].metrics.column("total")
        d["pair_max_total_diff"] = float(np.max(np.abs(np.subtract(with_term, without_term))))
        tags = {l.split(",")[0] for l in pair_csv.strip().splitlines()[1:]}
        assert tags == {"with_1_minus_pt", "without_1_minus_pt"}
        assert with_term != without_term


# -- 9 -------------------------------------------------------------------------------

TINY = """\
preset = "desk"
data.train_size = 600
data.test_size = 200
model.teacher_hidden = [32, 32]
model.student_hidden = [16]
schedule.total_epochs = 4
schedule.decay_start_epoch = 2.5
schedule.decay_period = 0.5
distill.warmup_epochs = 1
distill.serialization = "linear"
"""


def test_criterion_09_determinism(tmp_path):
    with criterion(9, "reruns give byte-identical metrics CSVs") as d:
        cfg = tmp_path / "tiny.toml"
        cfg.write_text(TINY)
        commands = [("train-teacher",)] + [("distill", "--method", m)
                                           for m in ("scratch", "kd", "dkd", "aekt")]
        compared = 0
        for args in commands:
            outs = []
            for rep in ("a", "b"):
                out = tmp_path / f"{'-'.join(args)}-{rep}"
                assert cli.main([*args, "--config", str(cfg), "--out", str(out)]) == 0
                outs.append(out / "metrics.csv")
            assert outs[0].read_bytes() == outs[1].read_bytes(), args
            compared += 1
        for rep in ("a", "b"):
            assert cli.main(["ablate", "--config", str(cfg), "--out", str(tmp_path / f"abl-{rep}")]) == 0
        for name in ("loss_terms", "head_variants", "target_term"):
            a = (tmp_path / "abl-a" / f"ablation_{name}.csv").read_bytes()
            assert a == (tmp_path / "abl-b" / f"ablation_{name}.csv").read_bytes(), name
            compared += 1
        for rep in ("a", "b"):
            assert cli.main(["verify-grads", "--cases", "25", "--out", str(tmp_path / f"v-{rep}")]) == 0
        assert (tmp_path / "v-a" / "verify_report.csv").read_bytes() == \
            (tmp_path / "v-b" / "verify_report.csv").read_bytes()
        d["files_compared"] = compared + 1


# -- 10 ------------------------------------------------------------------------------

def test_criterion_10_idx_parser(tmp_path):
    with criterion(10, "IDX fixtures round-trip; bad magic / truncation / count mismatch raise") as d:
        img, lab = tmp_path / "img", tmp_path / "lab"
        img.write_bytes(bytes.fromhex("00000803000000020000000200000002") + bytes([0, 255, 7, 9, 1, 2, 3, 4]))
        lab.write_bytes(bytes.fromhex("0000080100000002") + bytes([3, 1]))
        ds = read_idx(img, lab)
        assert ds.features.shape == (2, 4) and ds.features[0, 1] == 1.0
        rng = np.random.default_rng(10)
        images = rng.integers(0, 256, (9, 5, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, 9, dtype=np.uint8)
        write_idx(tmp_path / "ri", tmp_path / "rl", images, labels)
        back = read_idx(tmp_path / "ri", tmp_path / "rl")
        assert np.array_equal(np.rint(back.features * 255).astype(np.uint8), images.reshape(9, 15))
        assert np.array_equal(back.labels, labels)
        raised = []
        for exc, make in (
            (IdxFormatError, lambda: read_idx(img, img)),
            (IdxLengthError, lambda: (img.write_bytes(img.read_bytes()[:-2]), read_idx(img, lab))),
            (IdxConsistencyError, lambda: (
                img.write_bytes(bytes.fromhex("00000803000000030000000100000001") + bytes(3)),
                read_idx(img, lab))),
        ):
            try:
                make()
            except exc:
                raised.append(exc.__name__)
        d["errors"] = "/".join(raised)
        assert raised == ["IdxFormatError", "IdxLengthError", "IdxConsistencyError"]


if __name__ == "__main__":
    import sys
    import pytest
    sys.exit(pytest.main([__file__, "-v"]))
