import numpy as np
import pytest

from logitkd.optim import (DESK_SCHEDULE, CIFAR_SCHEDULE, Schedule, SgdState, lr_at,
                           sgd_step, warmup_factor)


def test_plain_sgd_without_momentum_or_decay():
    p = [np.array([1.0, 2.0])]
    sgd_step(SgdState(0.1, momentum=0.0, weight_decay=0.0), p, [np.array([0.5, -1.0])])
    np.testing.assert_allclose(p[0], [0.95, 2.1])


def test_zero_gradient_leaves_params():
    p = [np.array([1.0, -3.0])]
    SgdState(0.1, momentum=0.9, weight_decay=0.0).step(p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -3.0])


def test_momentum_and_weight_decay_recurrence():
    state = SgdState(0.1, momentum=0.9, weight_decay=0.01)
    p = [np.array([1.0])]
    g = np.array([0.5])
    state.step(p, [g])                      # v = 0.5 + 0.01 = 0.51
    assert p[0][0] == pytest.approx(1.0 - 0.051)
    theta = p[0][0]
    state.step(p, [g])                      # v = 0.9*0.51 + 0.5 + 0.01*theta
    assert p[0][0] == pytest.approx(theta - 0.1 * (0.459 + 0.5 + 0.01 * theta))


def test_step_shape_mismatch():
    with pytest.raises(ValueError):
        SgdState(0.1).step([np.ones(2)], [np.ones(3)])
    with pytest.raises(ValueError):
        SgdState(0.1).step([np.ones(2)], [])


def test_cifar_schedule_boundaries():
    s = CIFAR_SCHEDULE
    assert lr_at(s, 0.05, 0) == 0.05
    assert lr_at(s, 0.05, 149) == 0.05
    assert lr_at(s, 0.05, 150) == pytest.approx(0.005)
    assert lr_at(s, 0.05, 180) == pytest.approx(0.0005)
    assert s.boundaries() == [150, 180, 210]


def test_desk_schedule_is_cifar_shape_at_quarter_length():
    assert DESK_SCHEDULE.total_epochs * 4 == CIFAR_SCHEDULE.total_epochs
    assert [b * 4 for b in DESK_SCHEDULE.boundaries()] == CIFAR_SCHEDULE.boundaries()
    assert lr_at(DESK_SCHEDULE, 1.0, 37) == 1.0
    assert lr_at(DESK_SCHEDULE, 1.0, 38) == pytest.approx(0.1)


def test_warmup_factor():
    s = Schedule(warmup_epochs=20)
    assert warmup_factor(s, 0) == 0.0
    assert warmup_factor(s, 10) == 0.5
    assert warmup_factor(s, 20) == 1.0 and warmup_factor(s, 99) == 1.0
    assert warmup_factor(Schedule(warmup_epochs=0), 0) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(decay_factor=0.0)
    with pytest.raises(ValueError):
        Schedule(decay_period=0)
    with pytest.raises(ValueError):
        lr_at(Schedule(), 0.1, -1)
