import numpy as np
import pytest

from microfield.autodiff import Tensor
from microfield.optim import AdamState, Param, ParamGroup, adam_step, \
    check_unique_groups


def make_group(name="g", value=1.0, lr=0.1, trainable=True):
    t = Tensor(np.array([value], dtype=np.float32), requires_grad=trainable)
    return ParamGroup(name, [Param("w", t, lr)], trainable=trainable), t


def test_zero_gradient_is_fixed_point():
    group, t = make_group()
    t.grad = np.zeros(1, dtype=np.float32)
    before = t.data.copy()
    adam_step([group], AdamState())
    assert np.array_equal(t.data, before)


def test_first_step_is_bias_corrected_unit_step():
    group, t = make_group(value=1.0, lr=0.1)
    t.grad = np.ones(1, dtype=np.float32)
    adam_step([group], AdamState())
    assert abs(float(t.data[0]) - 0.9) < 1e-6


def test_frozen_group_is_bit_identical_even_with_gradient():
    group, t = make_group(trainable=False)
    t.grad = np.ones(1, dtype=np.float32)
    before = t.data.copy()
    state = AdamState()
    for _ in range(5):
        adam_step([group], state)
    assert np.array_equal(t.data, before)


def test_shape_mismatch_raises():
    group, t = make_group()
    t.grad = np.ones(2, dtype=np.float32)
    with pytest.raises(ValueError):
        adam_step([group], AdamState())


def test_step_counter_increases():
    group, t = make_group()
    state = AdamState()
    t.grad = np.ones(1, dtype=np.float32)
    adam_step([group], state)
    adam_step([group], state)
    assert state.step_count == 2


def test_duplicate_group_names_rejected():
    g1, _ = make_group("a")
    g2, _ = make_group("a")
    with pytest.raises(ValueError):
        check_unique_groups([g1, g2])


def test_tensor_in_two_groups_rejected():
    g1, t = make_group("a")
    g2 = ParamGroup("b", [Param("w", t, 0.1)])
    with pytest.raises(ValueError):
        check_unique_groups([g1, g2])


def test_set_trainable_toggles_requires_grad():
    group, t = make_group()
    group.set_trainable(False)
    assert not t.requires_grad
    group.set_trainable(True)
    assert t.requires_grad
