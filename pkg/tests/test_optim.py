import math

import numpy as np
import pytest

from deltaKit.core.exceptions import ConfigError, DomainError
from deltaKit.core.numerics import Rng
from deltaKit.model.config import parse_config
from deltaKit.training.optim import AdamState, TrainConfig, adamw_step, clip_by_global_norm, global_norm, lr_at


def test_schedule_shape():
    config = TrainConfig(peak_lr=3e-4, final_lr=3e-5, warmup_steps=10, total_steps=110)
    assert lr_at(0, config) == 0.0
    assert lr_at(5, config) == pytest.approx(1.5e-4)
    assert lr_at(10, config) == pytest.approx(3e-4)
    assert lr_at(60, config) == pytest.approx(3e-5 + 0.5 * (3e-4 - 3e-5))
    assert lr_at(110, config) == pytest.approx(3e-5)
    rates = [lr_at(s, config) for s in range(10, 111)]
    assert all(b <= a + 1e-18 for a, b in zip(rates, rates[1:]))
    with pytest.raises(DomainError):
        lr_at(111, config)


@pytest.mark.parametrize("data", [
    {"peak_lr": 1e-4, "final_lr": 1e-3},
    {"warmup_steps": 100, "total_steps": 100},
    {"beta2": 1.0},
])
def test_config_validation(data):
    with pytest.raises(ConfigError):
        parse_config(TrainConfig, data)


def test_global_norm_and_clip():
    grads = {"a": np.array([3.0]), "b": np.array([[4.0]])}
    assert global_norm(grads) == 5.0
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert global_norm(clipped) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_first_step_moves_by_learning_rate():
    config = TrainConfig(weight_decay=0.0, warmup_steps=0, total_steps=10)
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -3.0])}
    new, moments = adamw_step(params, grads, AdamState.zeros_like(params), 1, config, lr=0.1)
    np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), atol=1e-7)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_allclose(moments.m["w"], 0.1 * grads["w"])


def test_weight_decay_skips_vectors():
    config = TrainConfig(weight_decay=0.5, warmup_steps=0, total_steps=10)
    params = {"W": np.ones((2, 2)), "b": np.ones(2)}
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    new, _ = adamw_step(params, zeros, AdamState.zeros_like(params), 1, config, lr=0.1)
    np.testing.assert_allclose(new["W"], 0.95)
    np.testing.assert_array_equal(new["b"], 1.0)


def test_adamw_minimizes_quadratic():
    config = TrainConfig(peak_lr=0.05, final_lr=1e-5, warmup_steps=20, total_steps=2000, weight_decay=0.0)
    params = {"x": Rng(0).normal(10)}
    moments = AdamState.zeros_like(params)
    for step in range(1, config.total_steps + 1):
        params, moments = adamw_step(params, {"x": params["x"]}, moments, step, config)
    assert np.linalg.norm(params["x"]) <= 1e-3


def test_step_must_be_positive():
    params = {"w": np.zeros(1)}
    with pytest.raises(DomainError):
        adamw_step(params, params, AdamState.zeros_like(params), 0, TrainConfig())


def test_lr_without_warmup_starts_at_peak():
    config = TrainConfig(warmup_steps=0, total_steps=4)
    assert lr_at(0, config) == pytest.approx(config.peak_lr)
    assert math.isclose(lr_at(4, config), config.final_lr)


def test_adamw_descends_monotonically_after_warmup():
    config = TrainConfig(peak_lr=0.01, final_lr=0.001, warmup_steps=10, total_steps=100, weight_decay=0.01)
    params = {"x": np.ones(10)}
    moments = AdamState.zeros_like(params)
    norms = []
    for step in range(1, config.total_steps + 1):
        params, moments = adamw_step(params, {"x": params["x"]}, moments, step, config)
        norms.append(np.linalg.norm(params["x"]))
    after_warmup = norms[config.warmup_steps - 1:]
    assert all(b < a for a, b in zip(after_warmup, after_warmup[1:]))
    assert norms[-1] < np.linalg.norm(np.ones(10))
