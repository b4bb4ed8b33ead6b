import math

import numpy as np
import pytest

from fedrepopt import optim
from fedrepopt.errors import NumericalError, ShapeError
from fedrepopt.reparam import GradMultSpec
from fedrepopt.tensor import Tensor


def make_param(value, grad):
    t = Tensor(np.asarray(value, dtype=np.float64))
    t.grad = np.asarray(grad, dtype=np.float64)
    return t


def test_scalar_update_with_multiplier():
    # w' = 1 - 0.1 * 2 * 0.5 = 0.9
    t = make_param([1.0], [0.5])
    gm = GradMultSpec({"w": np.array([2.0])})
    optim.step([("w", t)], gm, optim.OptimConfig(lr=0.1), optim.OptimState())
    np.testing.assert_allclose(t.data, [0.9])


def test_absent_multiplier_is_plain_sgd():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    g = rng.standard_normal(5)
    a, b = make_param(w0, g), make_param(w0, g)
    optim.step([("w", a)], None, optim.OptimConfig(lr=0.3), optim.OptimState())
    optim.step([("other", b)], GradMultSpec({"w": np.array([3.0])}), optim.OptimConfig(lr=0.3), optim.OptimState())
    np.testing.assert_array_equal(a.data, w0 - 0.3 * g)
    np.testing.assert_array_equal(b.data, a.data)


def test_momentum_matches_hand_unrolled_recursion():
    # constant gradient g, momentum m: v1 = g~, v2 = m*g~ + g~
    g, m, lr, mult = 0.7, 0.9, 0.1, 2.0
    t = make_param([1.0], [g])
    gm = GradMultSpec({"w": np.array([mult])})
    cfg = optim.OptimConfig(lr=lr, momentum=m)
    state = optim.OptimState()
    optim.step([("w", t)], gm, cfg, state)
    t.grad = np.array([g])
    optim.step([("w", t)], gm, cfg, state)
    gt = mult * g
    expected = 1.0 - lr * gt - lr * (m * gt + gt)
    np.testing.assert_allclose(t.data, [expected])
    assert state.step_count == 2


def test_zero_gradient_leaves_parameters_unchanged():
    t = make_param([3.0, -2.0], [0.0, 0.0])
    gm = GradMultSpec({"w": np.array([5.0, 5.0])})
    optim.step([("w", t)], gm, optim.OptimConfig(lr=1.0, momentum=0.5), optim.OptimState())
    np.testing.assert_array_equal(t.data, [3.0, -2.0])


def test_nan_gradient_aborts_naming_parameter():
    t = make_param([1.0], [np.nan])
    with pytest.raises(NumericalError, match="stage0/conv/w"):
        optim.step([("stage0/conv/w", t)], None, optim.OptimConfig(lr=0.1), optim.OptimState())


def test_missing_gradient_rejected():
    t = Tensor(np.zeros(2))
    with pytest.raises(NumericalError, match="missing gradient"):
        optim.step([("p", t)], None, optim.OptimConfig(lr=0.1), optim.OptimState())


def test_multiplier_broadcast_shapes():
    t = make_param(np.ones((2, 3, 3, 3)), np.ones((2, 3, 3, 3)))
    per_channel = GradMultSpec({"w": np.full((2, 1, 1, 1), 2.0)})
    optim.step([("w", t)], per_channel, optim.OptimConfig(lr=0.5), optim.OptimState())
    np.testing.assert_array_equal(t.data, np.zeros((2, 3, 3, 3)))
    bad = GradMultSpec({"w": np.ones((5, 2, 3, 3, 3))})
    t.grad = np.ones((2, 3, 3, 3))
    with pytest.raises(ShapeError):
        optim.step([("w", t)], bad, optim.OptimConfig(lr=0.5), optim.OptimState())


class TestLrSchedule:
    def test_constant(self):
        cfg = optim.OptimConfig(lr=0.2)
        assert optim.lr_at(cfg, 0) == 0.2
        assert optim.lr_at(cfg, 10_000) == 0.2

    def test_cosine_endpoints_and_midpoint(self):
        cfg = optim.OptimConfig(lr=0.2, schedule="cosine", total_steps=100)
        assert optim.lr_at(cfg, 0) == 0.2
        assert abs(optim.lr_at(cfg, 50) - 0.1) < 1e-15
        assert abs(optim.lr_at(cfg, 100)) < 1e-17
        assert optim.lr_at(cfg, 150) == optim.lr_at(cfg, 100)

    def test_cosine_requires_total_steps(self):
        with pytest.raises(ShapeError):
            optim.OptimConfig(lr=0.1, schedule="cosine")


def test_config_validation():
    with pytest.raises(ShapeError):
        optim.OptimConfig(lr=0.0)
    with pytest.raises(ShapeError):
        optim.OptimConfig(lr=0.1, momentum=1.0)
    with pytest.raises(ShapeError):
        optim.OptimConfig(lr=0.1, weight_decay=1e-4)


def test_cosine_midpoint_formula():
    cfg = optim.OptimConfig(lr=1.0, schedule="cosine", total_steps=7)
    for step in range(8):
        expected = 0.5 * (1 + math.cos(math.pi * step / 7))
        assert abs(optim.lr_at(cfg, step) - expected) < 1e-15
