import pytest

TINY = """\
preset = "desk"
data.train_size = 300
data.test_size = 120
model.teacher_hidden = [24, 24]
model.student_hidden = [8]
schedule.total_epochs = 3
schedule.decay_start_epoch = 2.0
schedule.decay_period = 1.0
distill.warmup_epochs = 1
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda l: int(l.split()[2])):
        terminalreporter.write_line(line)
