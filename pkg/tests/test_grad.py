import numpy as np
import pytest

from deltaKit.core.exceptions import ConfigError, DomainError, ShapeMismatchError
from deltaKit.core.grad import (
    GradCheckReport,
    LossSpec,
    backward_sequential,
    central_difference,
    finite_diff_check,
    relative_error,
    value_and_grad,
)
from deltaKit.core.numerics import Rng
from deltaKit.core.rules import RULE_NAMES, Gates
from deltaKit.core.scan import SequenceInputs, run_sequential

GRAD_TOL = 1e-5


def test_zero_upstream_gives_zero_gradients(make_inputs):
    inputs = make_inputs("fg2gdn_plus", 6, 4, seed=1)
    grads = backward_sequential(inputs, np.zeros((6, 4)))
    for name, grad in grads.items():
        assert not np.any(grad), name


def test_one_step_linear_by_hand():
    e = np.eye(3)
    inputs = SequenceInputs(q=e[None, 0], k=e[None, 0], v=np.zeros((1, 3)), gates=Gates(), rule="linear")
    grads = backward_sequential(inputs, e[None, 1])
    np.testing.assert_allclose(grads.dv, e[None, 1])
    np.testing.assert_allclose(grads.dS0, np.outer(e[0], e[1]))


def test_dO_shape_is_checked(make_inputs):
    with pytest.raises(ShapeMismatchError):
        backward_sequential(make_inputs("kda", 5, 4), np.zeros((4, 4)))


def test_gradient_shapes_mirror_inputs(make_inputs):
    inputs = make_inputs("gdn", 7, 5, d_v=3, lanes=(2,), seed=2)
    grads = backward_sequential(inputs, np.ones((2, 7, 3)), np.ones((2, 5, 3)))
    assert grads.dq.shape == inputs.q.shape
    assert grads.dv.shape == inputs.v.shape
    assert grads.dS0.shape == inputs.S0.shape
    assert grads.dalpha.shape == inputs.gates.alpha.shape == (2, 7, 1)
    assert grads.dbeta.shape == (2, 7, 1)


def test_retnet_decay_gets_no_gradient(make_inputs):
    grads = backward_sequential(make_inputs("retnet", 4, 3), np.ones((4, 3)))
    assert grads.dalpha is None


def test_fg2gdn_matches_finite_differences(make_inputs):
    inputs = make_inputs("fg2gdn", 16, 8, seed=0)
    loss = LossSpec.random("sum_squares", inputs, Rng(0).spawn(7))
    report = finite_diff_check(inputs, loss)
    assert report.passed, report.to_dict()
    assert report.checked > 0


@pytest.mark.parametrize("rule", RULE_NAMES)
def test_every_rule_matches_finite_differences(make_inputs, rule):
    inputs = make_inputs(rule, 12, 6, seed=0)
    report = finite_diff_check(inputs, LossSpec.random("sum_squares", inputs, Rng(0).spawn(7)), tol=GRAD_TOL)
    assert report.passed, report.to_dict()


@pytest.mark.parametrize("rule", ["kda", "fg2gdn", "fg2gdn_plus", "rwkv7"])
def test_cross_entropy_loss_matches_finite_differences(make_inputs, rule):
    inputs = make_inputs(rule, 12, 6, seed=1)
    report = finite_diff_check(inputs, LossSpec.random("cross_entropy", inputs, Rng(1).spawn(7)), tol=GRAD_TOL)
    assert report.passed, report.to_dict()


@pytest.mark.slow
@pytest.mark.parametrize("rule", RULE_NAMES)
def test_every_rule_five_seeds(make_inputs, rule):
    for seed in range(5):
        inputs = make_inputs(rule, 12, 6, seed=seed)
        report = finite_diff_check(inputs, LossSpec.random("sum_squares", inputs, Rng(seed).spawn(7)))
        assert report.passed, report.to_dict()


def test_lanes_gradients_match_finite_differences(make_inputs):
    inputs = make_inputs("kda", 5, 3, lanes=(2,), seed=3)
    report = finite_diff_check(inputs, LossSpec.random("sum_squares", inputs, Rng(3)))
    assert report.passed, report.to_dict()


def test_linear_rule_value_gradient_near_exact(make_inputs):
    inputs = make_inputs("linear", 8, 4, seed=4)
    loss = LossSpec.random("sum_squares", inputs, Rng(4), state_weight=0.0)
    _, grads = value_and_grad(inputs, loss)

    def objective(v):
        return loss.value(run_sequential(inputs.replace(v=v)))

    errors = [abs(central_difference(objective, inputs.v, index, 1e-5) - grads.dv[index])
              for index in np.ndindex(inputs.v.shape)]
    assert max(errors) <= 1e-9


def test_corrupted_gradient_is_flagged(make_inputs):
    inputs = make_inputs("fg2gdn", 6, 4, seed=5)
    loss = LossSpec.random("sum_squares", inputs, Rng(5))
    _, grads = value_and_grad(inputs, loss)
    dv = grads.dv.copy()
    dv[3, 2] += 1e-3
    corrupted = type(grads)(dq=grads.dq, dk=grads.dk, dv=dv, dgates=grads.dgates, dS0=grads.dS0)
    report = finite_diff_check(inputs, loss, analytic=corrupted)
    assert not report.passed
    assert report.worst == ("v", (3, 2))


@pytest.mark.parametrize("rule", ["linear", "gla", "hgrn2"])
def test_value_gradient_independent_of_values(make_inputs, rule, rng):
    inputs = make_inputs(rule, 8, 4, seed=6)
    dO = rng.normal((8, 4))
    first = backward_sequential(inputs, dO).dv
    second = backward_sequential(inputs.replace(v=rng.normal((8, 4))), dO).dv
    np.testing.assert_array_equal(first, second)


def test_channel_beta_gradient_sums_to_scalar(make_inputs, rng):
    kda = make_inputs("kda", 10, 6, seed=7)
    fg = kda.replace(rule="fg2gdn", gates=kda.gates.replace(beta=np.repeat(kda.gates.beta, 6, axis=-1)))
    dO = rng.normal((10, 6))
    scalar = backward_sequential(kda, dO).dbeta
    channel = backward_sequential(fg, dO).dbeta
    np.testing.assert_allclose(channel.sum(axis=-1, keepdims=True), scalar, atol=1e-10)


def test_zero_beta_entries_get_zero_gradient(make_inputs, rng):
    inputs = make_inputs("fg2gdn", 5, 4, seed=8)
    beta = inputs.gates.beta.copy()
    beta[2, 1] = 0.0
    inputs = inputs.replace(gates=inputs.gates.replace(beta=beta))
    grads = backward_sequential(inputs, rng.normal((5, 4)))
    assert grads.dbeta[2, 1] == 0.0
    report = finite_diff_check(inputs, LossSpec.random("sum_squares", inputs, Rng(8)))
    assert report.skipped >= 1


def test_value_and_grad_matches_loss(make_inputs):
    inputs = make_inputs("gdn", 6, 4, seed=9)
    loss = LossSpec.random("cross_entropy", inputs, Rng(9))
    value, _ = value_and_grad(inputs, loss)
    assert value == pytest.approx(loss.value(run_sequential(inputs)))


def test_loss_spec_validation():
    with pytest.raises(ConfigError):
        LossSpec("hinge")
    with pytest.raises(ConfigError):
        LossSpec("cross_entropy", target=np.zeros(3, dtype=int))


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_central_difference_does_not_mutate():
    base = np.array([1.0, 2.0])
    estimate = central_difference(lambda x: float(x[0] ** 2 + 3 * x[1]), base, (0,), 1e-5)
    assert estimate == pytest.approx(2.0, rel=1e-8)
    np.testing.assert_array_equal(base, [1.0, 2.0])


def test_report_serialization():
    report = GradCheckReport(tol=1e-5, label="demo")
    report.record("q", (0, 1), 1.0, 1.0)
    report.record("k", (2, 0), 1.0, 1.1)
    payload = report.to_dict()
    assert payload["worst_field"] == "k" and payload["worst_index"] == [2, 0]
    assert payload["checked"] == 2 and not payload["passed"]


def test_finite_diff_rejects_bad_step(make_inputs):
    inputs = make_inputs("linear", 3, 2)
    with pytest.raises(DomainError):
        finite_diff_check(inputs, LossSpec(), h=0.0)
