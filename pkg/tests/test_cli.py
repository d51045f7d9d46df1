import csv

import numpy as np
import pytest

from logitkd import cli
from logitkd.models import Mlp, save_model


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_teacher_writes_run_dir(tiny_config, tmp_path, capsys):
    out = tmp_path / "teacher"
    assert run("train-teacher", "--config", tiny_config, "--out", out) == 0
    for name in ("config.toml", "metrics.csv", "model.ckpt", "summary.txt"):
        assert (out / name).exists()
    rows = read_csv(out / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]
    assert "test_acc" in capsys.readouterr().out


def test_rerun_is_byte_identical(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("distill", "--config", tiny_config, "--out", out, "--method", "aekt") == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()


def test_seed_changes_results(tiny_config, tmp_path):
    run("train-teacher", "--config", tiny_config, "--out", tmp_path / "s1", "--seed", 1)
    run("train-teacher", "--config", tiny_config, "--out", tmp_path / "s2", "--seed", 2)
    assert (tmp_path / "s1" / "metrics.csv").read_bytes() != (tmp_path / "s2" / "metrics.csv").read_bytes()


def test_distill_with_linear_head_exports_weights(tiny_config, tmp_path):
    out = tmp_path / "ser"
    cfg = tiny_config.read_text() + 'distill.serialization = "linear"\n'
    path = tmp_path / "ser.toml"
    path.write_text(cfg)
    assert run("distill", "--config", path, "--out", out) == 0
    assert (out / "head_weights.csv").exists() and (out / "head_top.csv").exists()
    assert "head_diagonal_dominance" in (out / "summary.txt").read_text()
    assert (out / "teacher" / "model.ckpt").exists()


def test_distill_from_teacher_checkpoint_and_eval_similarity(tiny_config, tmp_path, capsys):
    run("train-teacher", "--config", tiny_config, "--out", tmp_path / "t")
    teacher = tmp_path / "t" / "model.ckpt"
    assert run("distill", "--config", tiny_config, "--teacher", teacher,
               "--out", tmp_path / "s", "--method", "kd") == 0
    assert not (tmp_path / "s" / "teacher").exists()
    capsys.readouterr()
    assert run("eval-similarity", "--config", tiny_config, teacher, teacher) == 0
    out = capsys.readouterr().out
    assert "cosine_similarity = 1.0" in out and "agreement = 1.0" in out and "samples = 120" in out


def test_class_count_mismatch_is_config_error(tiny_config, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    save_model(bad, Mlp([64, 4, 7]))
    assert run("distill", "--config", tiny_config, "--teacher", bad, "--out", tmp_path / "x") == 2
    assert run("eval-similarity", "--config", tiny_config, bad, bad) == 2
    assert "classes" in capsys.readouterr().err


def test_missing_checkpoint_is_io_error(tiny_config, tmp_path):
    assert run("distill", "--config", tiny_config, "--teacher", tmp_path / "none.ckpt",
               "--out", tmp_path / "x") == 3


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("data.num_classes = 20\n")
    assert run("train-teacher", "--config", p) == 2
    assert "missing config field" in capsys.readouterr().err


def test_verify_grads_pass_and_report(tmp_path, capsys):
    assert run("verify-grads", "--cases", 20, "--out", tmp_path) == 0
    text = capsys.readouterr().out
    assert "ALL PASS" in text
    rows = read_csv(tmp_path / "verify_report.csv")
    assert {r["formula"] for r in rows} >= {"KD", "TCKD", "NCKD", "DKD", "AEKT", "TOTAL_DISTILL"}


def test_verify_grads_negative_control(capsys):
    assert run("verify-grads", "--cases", 20, "--corrupt", "KD") == 4
    text = capsys.readouterr().out
    assert "FAILED: KD\n" in text
    assert [l.split()[1] for l in text.splitlines() if l.startswith("FAIL ")] == ["KD"]


def test_verify_grads_rejects_zero_cases():
    assert run("verify-grads", "--cases", 0) == 2


def test_ablate_single_grid(tiny_config, tmp_path):
    assert run("ablate", "--config", tiny_config, "--out", tmp_path, "--grid", "target_term") == 0
    rows = read_csv(tmp_path / "ablation_target_term.csv")
    assert {r["variant"] for r in rows} == {"with_1_minus_pt", "without_1_minus_pt"}
    assert len(rows) == 6
