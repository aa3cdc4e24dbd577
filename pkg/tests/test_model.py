import numpy as np
import pytest

from deltaKit.core.exceptions import ConfigError, DomainError
from deltaKit.core.numerics import Rng, elementwise
from deltaKit.model.config import ModelConfig, parse_config
from deltaKit.model.layers import (
    causal_attention_backward,
    causal_attention_forward,
    l2norm_backward,
    l2norm_forward,
    masked_cross_entropy,
    merge_heads,
    rmsnorm_backward,
    rmsnorm_forward,
    split_heads,
    swiglu_forward,
)
from deltaKit.model.network import (
    compute_gates,
    count_parameters,
    forward,
    gradcheck_model,
    init_parameters,
    linear_attention_block,
    loss_and_grad,
    parameter_shapes,
)


def small_config(**overrides):
    values = dict(vocab_size=16, d_model=16, n_layers=2, n_heads=2, head_dim=8, rule="fg2gdn", chunk_size=4)
    values.update(overrides)
    return ModelConfig(**values)


def _numeric_grad(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        grad[index] = (f(plus) - f(minus)) / (2 * h)
    return grad


# ===== config =====
def test_config_rejects_inconsistent_heads():
    with pytest.raises(ConfigError) as excinfo:
        parse_config(ModelConfig, {"d_model": 30, "n_heads": 2, "head_dim": 16})
    assert excinfo.value.errors


def test_config_rejects_unknown_rule():
    with pytest.raises(ConfigError) as excinfo:
        parse_config(ModelConfig, {"rule": "transformer"})
    assert any(err["field"] == "rule" for err in excinfo.value.errors)


def test_hybrid_layout_three_to_one():
    config = ModelConfig(n_layers=8, hybrid_ratio=3)
    kinds = config.layer_kinds()
    assert [i + 1 for i, kind in enumerate(kinds) if kind == "attention"] == [4, 8]
    assert ModelConfig(n_layers=3).layer_kinds() == ["linear"] * 3


# ===== parameters =====
def test_init_is_deterministic():
    config = small_config(seed=3)
    a, b = init_parameters(config), init_parameters(config)
    assert list(a) == list(parameter_shapes(config))
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(init_parameters(small_config(seed=4))["layers.0.W_q"], a["layers.0.W_q"])


def test_gate_biases_hit_target_rates():
    params = init_parameters(small_config(rule="fg2gdn_plus"))
    for name, target in (("b_alpha", 0.95), ("b_beta", 0.5), ("b_beta_v", 0.5)):
        rate = elementwise("sigmoid", params[f"layers.0.{name}"])
        np.testing.assert_allclose(rate, target, atol=1e-6)


def test_weight_variance_matches_fan_in():
    config = ModelConfig(vocab_size=8, d_model=1024, n_layers=1, n_heads=8, head_dim=128, mlp_mult=1)
    W = init_parameters(config)["layers.0.W_q"]
    assert abs(W.var() * 1024 - 1.0) < 0.2


def test_beta_v_projection_parameter_delta():
    base, plus = small_config(n_layers=4, hybrid_ratio=1), small_config(n_layers=4, hybrid_ratio=1,
                                                                        rule="fg2gdn_plus")
    linear_layers = base.layer_kinds().count("linear")
    d = base.d_model
    delta = count_parameters(init_parameters(plus)) - count_parameters(init_parameters(base))
    assert delta == linear_layers * (d * base.n_heads * base.head_dim + base.n_heads * base.head_dim)


def test_attention_layers_have_no_gate_projections():
    shapes = parameter_shapes(small_config(hybrid_ratio=1))
    assert "layers.0.W_alpha" in shapes
    assert "layers.1.W_alpha" not in shapes


# ===== gates =====
def test_zero_input_gates_are_bias_rates():
    config = small_config()
    gates, _ = compute_gates(np.zeros((3, config.d_model)), init_parameters(config), 0, config)
    np.testing.assert_allclose(gates.alpha, 0.95, atol=1e-6)
    np.testing.assert_allclose(gates.beta, 0.5, atol=1e-6)
    assert gates.alpha.shape == (3, 2, 8)


def test_gates_open_interval_and_widths(rng):
    for rule, widths in (("gdn", {"alpha": 1, "beta": 1}), ("kda", {"alpha": 8, "beta": 1}),
                         ("rwkv7", {"alpha": 8, "beta": 8, "kappa": 8}), ("retnet", {"alpha": 1})):
        config = small_config(rule=rule)
        gates, _ = compute_gates(rng.normal((5, 16), scale=10.0), init_parameters(config), 0, config)
        for name, width in widths.items():
            value = getattr(gates, name)
            assert value.shape == (5, 2, width)
            if name != "kappa":
                assert np.all(value > 0.0) and np.all(value < 1.0)
    config = small_config(rule="rwkv7")
    gates, _ = compute_gates(rng.normal((5, 16)), init_parameters(config), 0, config)
    np.testing.assert_allclose(np.linalg.norm(gates.kappa, axis=-1), 1.0, atol=1e-12)


def test_fg2gdn_plus_key_and_value_rates_differ(rng):
    config = small_config(rule="fg2gdn_plus")
    gates, _ = compute_gates(rng.normal((4, 16)), init_parameters(config), 0, config)
    assert not np.allclose(gates.beta, gates.beta_v)


# ===== blocks =====
def test_linear_attention_paths_agree(rng):
    config = small_config()
    X = rng.normal((2, 11, 16))
    params = init_parameters(config)
    seq, _ = linear_attention_block(X, params, 0, config, "sequential")
    chunk, _ = linear_attention_block(X, params, 0, config, "chunkwise")
    assert np.max(np.abs(seq - chunk)) <= 1e-10


def test_linear_attention_block_is_causal(rng):
    config = small_config(rule="kda")
    params = init_parameters(config)
    X = rng.normal((1, 9, 16))
    base, _ = linear_attention_block(X, params, 0, config)
    X2 = X.copy()
    X2[0, 5:] += 1.0
    changed, _ = linear_attention_block(X2, params, 0, config)
    np.testing.assert_array_equal(changed[0, :5], base[0, :5])


def test_linear_attention_rejects_unknown_path(rng):
    config = small_config()
    with pytest.raises(ConfigError):
        linear_attention_block(rng.normal((1, 3, 16)), init_parameters(config), 0, config, "parallel")


def test_causal_attention_rows_normalized(rng):
    q, k, v = (rng.normal((2, 3, 6, 4)) for _ in range(3))
    _, (_, _, _, probs, _) = causal_attention_forward(q, k, v)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert not np.triu(probs, k=1).any()


def test_causal_attention_uniform_scores(rng):
    L = 5
    v = rng.normal((1, 1, L, 3))
    out, (_, _, _, probs, _) = causal_attention_forward(np.zeros((1, 1, L, 3)), rng.normal((1, 1, L, 3)), v)
    for t in range(L):
        np.testing.assert_allclose(probs[0, 0, t, :t + 1], 1.0 / (t + 1))
    np.testing.assert_allclose(out[0, 0, 0], v[0, 0, 0])


def test_causal_attention_backward(rng):
    q, k, v = (rng.normal((1, 2, 4, 3)) for _ in range(3))
    dout = rng.normal((1, 2, 4, 3))
    _, cache = causal_attention_forward(q, k, v)
    dq, dk, dv = causal_attention_backward(dout, cache)
    np.testing.assert_allclose(dq, _numeric_grad(lambda x: np.sum(causal_attention_forward(x, k, v)[0] * dout), q),
                               atol=1e-8)
    np.testing.assert_allclose(dk, _numeric_grad(lambda x: np.sum(causal_attention_forward(q, x, v)[0] * dout), k),
                               atol=1e-8)
    np.testing.assert_allclose(dv, _numeric_grad(lambda x: np.sum(causal_attention_forward(q, k, x)[0] * dout), v),
                               atol=1e-8)


def test_norm_backwards(rng):
    x, scale, dy = rng.normal((3, 5)), rng.normal(5), rng.normal((3, 5))
    _, cache = rmsnorm_forward(x, scale)
    dx, dscale = rmsnorm_backward(dy, cache)
    np.testing.assert_allclose(dx, _numeric_grad(lambda z: np.sum(rmsnorm_forward(z, scale)[0] * dy), x), atol=1e-8)
    np.testing.assert_allclose(dscale, _numeric_grad(lambda s: np.sum(rmsnorm_forward(x, s)[0] * dy), scale),
                               atol=1e-8)
    _, cache = l2norm_forward(x)
    np.testing.assert_allclose(l2norm_backward(dy, cache),
                               _numeric_grad(lambda z: np.sum(l2norm_forward(z)[0] * dy), x), atol=1e-8)


def test_swiglu_formula(rng):
    W_gate, W_up, W_down = rng.normal((4, 6)), rng.normal((4, 6)), rng.normal((6, 4))
    assert not swiglu_forward(np.zeros(4), W_gate, W_up, W_down)[0].any()
    assert not swiglu_forward(rng.normal(4), W_gate, np.zeros((4, 6)), W_down)[0].any()
    x = rng.normal(4)
    g = x @ W_gate
    expected = ((g / (1.0 + np.exp(-g))) * (x @ W_up)) @ W_down
    np.testing.assert_allclose(swiglu_forward(x, W_gate, W_up, W_down)[0], expected, atol=1e-13)


def test_head_split_round_trip(rng):
    x = rng.normal((2, 5, 12))
    assert split_heads(x, 3).shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(merge_heads(split_heads(x, 3)), x)


def test_masked_cross_entropy(rng):
    logits = rng.normal((2, 4, 5))
    targets = np.array([[1, -1, 3, -1], [-1, 0, -1, -1]])
    mask = targets != -1
    loss, dlogits = masked_cross_entropy(logits, targets, mask)
    assert not dlogits[~mask].any()
    numeric = _numeric_grad(lambda z: masked_cross_entropy(z, targets, mask)[0], logits)
    np.testing.assert_allclose(dlogits, numeric, atol=1e-8)
    with pytest.raises(DomainError):
        masked_cross_entropy(logits, targets, np.zeros_like(mask))


# ===== full model =====
def test_forward_shapes_and_token_check():
    config = small_config()
    params = init_parameters(config)
    assert forward(np.arange(7) % 16, params, config).logits.shape == (7, 16)
    assert forward(np.zeros((3, 7), dtype=int), params, config).logits.shape == (3, 7, 16)
    with pytest.raises(DomainError):
        forward(np.array([0, 16]), params, config)


def test_forward_causality(rng):
    config = small_config(n_layers=4, hybrid_ratio=1)
    params = init_parameters(config)
    tokens = rng.integers(0, 16, 12)
    base = forward(tokens, params, config).logits
    for trial in range(10):
        t = int(rng.integers(0, 11))
        changed = tokens.copy()
        changed[t + 1:] = rng.integers(0, 16, 11 - t)
        np.testing.assert_array_equal(forward(changed, params, config).logits[:t + 1], base[:t + 1])


def test_train_and_inference_paths_agree(rng):
    config = small_config(n_layers=3, hybrid_ratio=2, rule="fg2gdn_plus")
    params = init_parameters(config)
    tokens = rng.integers(0, 16, (2, 13))
    seq = forward(tokens, params, config, "sequential").logits
    chunk = forward(tokens, params, config, "chunkwise").logits
    assert np.max(np.abs(seq - chunk)) <= 1e-8


def test_gradients_cover_every_parameter(rng):
    config = small_config(hybrid_ratio=1, rule="rwkv7")
    params = init_parameters(config)
    tokens = rng.integers(0, 16, (2, 6))
    loss, grads, _ = loss_and_grad(params, config, tokens, tokens, np.ones((2, 6), dtype=bool))
    assert np.isfinite(loss)
    assert set(grads) == set(params)
    for name in params:
        assert grads[name].shape == params[name].shape


@pytest.mark.parametrize("rule", ["fg2gdn", "fg2gdn_plus", "rwkv7", "hgrn2", "retnet"])
def test_model_gradcheck_hybrid(rng, rule):
    config = ModelConfig(vocab_size=16, d_model=32, n_layers=2, n_heads=2, head_dim=16, hybrid_ratio=1,
                         rule=rule, seed=1)
    tokens = rng.integers(0, 16, (2, 8))
    targets = Rng(2).integers(0, 16, (2, 8))
    mask = np.ones((2, 8), dtype=bool)
    report = gradcheck_model(init_parameters(config), config, tokens, targets, mask, samples_per_tensor=4)
    assert report.passed, report.to_dict()
