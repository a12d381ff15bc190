import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adnet.errors import DataError, ParameterError, StateError
from adnet.gradcheck import numeric_grad, rel_error
from adnet.graph import ParamStore
from adnet.optim import AdamConfig, adam_step, binary_logistic_cost, logistic_objective, softmax_cross_entropy


def scalar_store(theta=0.0):
    store = ParamStore()
    store.add("theta", np.array([theta]))
    return store


def test_logistic_cost_at_half():
    assert binary_logistic_cost(0.0, 1) == pytest.approx(math.log(2), abs=1e-15)


def test_logistic_cost_perfect_prediction():
    assert binary_logistic_cost(50.0, 1) < 1e-20


def test_logistic_cost_negative_branch_uses_shifted_argument():
    # y = 0 evaluates -log(sigmoid(1 - z))
    assert binary_logistic_cost(1.0, 0) == pytest.approx(math.log(2), abs=1e-15)
    z = 0.3
    assert binary_logistic_cost(z, 0) == pytest.approx(-math.log(1 / (1 + math.exp(-(1 - z)))), rel=1e-14)


def test_logistic_objective_loop_oracle():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=7).tolist(), rng.integers(0, 2, size=7).tolist()
    total = 0.0
    for zi, yi in zip(z, y):
        s = 1 / (1 + math.exp(-(zi if yi else 1 - zi)))
        total += -math.log(s)
    assert logistic_objective(z, y) == pytest.approx(total / 7, rel=1e-13)
    with pytest.raises(DataError):
        binary_logistic_cost(0.0, 2)


def test_cross_entropy_perfect_and_uniform():
    assert softmax_cross_entropy(np.array([[800.0, 0, 0], [0, 0, 800.0]]), [0, 2]).mean_loss == 0.0
    lv = softmax_cross_entropy(np.zeros((4, 3)), [0, 1, 2, 1])
    assert lv.mean_loss == pytest.approx(math.log(3), abs=1e-15)


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(1)
    z, labels = rng.normal(size=(5, 3)) * 2, rng.integers(0, 3, size=5)
    num = numeric_grad(lambda: softmax_cross_entropy(z, labels).mean_loss, z)
    assert rel_error(softmax_cross_entropy(z, labels).grad_logits, num).max() <= 1e-6


def test_cross_entropy_label_checks():
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((2, 3)), [0])


def test_adam_zero_gradient_is_noop():
    store = scalar_store(0.7)
    adam_step(store, {"theta": np.zeros(1)}, AdamConfig())
    assert store["theta"][0] == 0.7


def test_adam_first_step_hand_value():
    store = scalar_store()
    cfg = adam_step(store, {"theta": np.ones(1)}, AdamConfig(learning_rate=0.001))
    assert cfg.t == 1
    assert store["theta"][0] == pytest.approx(-0.001 / (1 + 1e-7), abs=1e-18)


def test_adam_two_step_hand_trace():
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-7
    theta, m, v = 0.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    store, cfg = scalar_store(), AdamConfig()
    for _ in range(2):
        adam_step(store, {"theta": np.ones(1)}, cfg)
    assert abs(store["theta"][0] - theta) <= 1e-12
    assert abs(store.entry("theta").m[0] - 0.19) <= 1e-15


def test_adam_converges_on_quadratic():
    store, cfg = scalar_store(3.0), AdamConfig(learning_rate=0.01)
    for _ in range(5000):
        adam_step(store, {"theta": 2 * (store["theta"] - 1.5)}, cfg)
    assert abs(store["theta"][0] - 1.5) < 1e-3


def test_adam_name_mismatch():
    store = scalar_store()
    with pytest.raises(StateError, match="missing"):
        adam_step(store, {}, AdamConfig())
    with pytest.raises(StateError, match="extra"):
        adam_step(store, {"theta": np.ones(1), "other": np.ones(1)}, AdamConfig())


def test_adam_skips_frozen_entries():
    store = scalar_store()
    store.add("stat", np.array([5.0]), trainable=False)
    adam_step(store, {"theta": np.ones(1)}, AdamConfig())
    assert store["stat"][0] == 5.0


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"beta1": 1.0}, {"epsilon": 0}])
def test_adam_config_guards(kw):
    with pytest.raises(ParameterError):
        AdamConfig(**kw)


@given(st.floats(-5, 5), st.floats(1e-3, 10), st.floats(1e-4, 1e-1))
@settings(max_examples=50, deadline=None)
def test_adam_first_step_moves_by_learning_rate(theta, g, lr):
    store = scalar_store(theta)
    adam_step(store, {"theta": np.array([g])}, AdamConfig(learning_rate=lr))
    step = theta - store["theta"][0]
    assert step == pytest.approx(lr * g / (g + 1e-7), rel=1e-9)
