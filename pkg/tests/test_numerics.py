import numpy as np
import pytest

from deltaKit.core.exceptions import DomainError, NonFiniteError, ShapeMismatchError
from deltaKit.core.numerics import (
    Rng,
    as_array,
    diag_scale,
    elementwise,
    elementwise_derivative,
    frobenius,
    householder_apply,
    l2_normalize,
    matvec_T,
    outer,
    sigmoid,
)


def test_outer_basis_and_zero():
    assert np.array_equal(outer([1.0, 0.0], [0.0, 1.0]), [[0.0, 1.0], [0.0, 0.0]])
    assert not outer([0.0, 0.0], [3.0, 4.0]).any()


def test_outer_matches_loop(rng):
    u, v = rng.normal(4), rng.normal(4)
    expected = np.array([[u[i] * v[j] for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(outer(u, v), expected, rtol=0, atol=1e-15)


def test_matvec_T_recalls_stored_pair():
    e1, e2 = np.eye(2)
    assert np.array_equal(matvec_T(outer(e1, e2), e1), e2)
    assert not matvec_T(np.zeros((2, 3)), e1).any()


def test_matvec_T_matches_loop(rng):
    S, q = rng.normal((5, 3)), rng.normal(5)
    expected = [sum(S[i, j] * q[i] for i in range(5)) for j in range(3)]
    np.testing.assert_allclose(matvec_T(S, q), expected, atol=1e-14)


def test_matvec_T_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        matvec_T(np.zeros((3, 2)), np.zeros(4))


def test_householder_zero_key_is_identity(rng):
    S = rng.normal((4, 3))
    np.testing.assert_array_equal(householder_apply(S, np.zeros(4)), S)


def test_householder_annihilates_own_direction(rng):
    k = l2_normalize(rng.normal(8))
    S = outer(k, rng.normal(5))
    np.testing.assert_allclose(householder_apply(S, k), 0.0, atol=1e-14)


def test_householder_matches_dense_reflector(rng):
    S, k = rng.normal((8, 6)), rng.normal(8) * 0.3
    dense = (np.eye(8) - np.outer(k, k)) @ S
    np.testing.assert_allclose(householder_apply(S, k), dense, atol=1e-13)


def test_householder_rank_one_identity(rng):
    S, k = rng.normal((6, 4)), rng.normal(6)
    rebuilt = householder_apply(S, k) + outer(k, matvec_T(S, k))
    np.testing.assert_allclose(rebuilt, S, rtol=1e-14, atol=1e-14)


def test_householder_is_contractive_for_short_keys(rng):
    S = rng.normal((1000, 6, 5))
    k = l2_normalize(rng.normal((1000, 6))) * rng.uniform(0.0, 1.0, (1000, 1))
    assert np.all(frobenius(householder_apply(S, k)) <= frobenius(S) * (1 + 1e-12))


def test_householder_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        householder_apply(np.zeros((3, 3)), np.zeros(2))


def test_diag_scale(rng):
    S, alpha = rng.normal((4, 3)), rng.uniform(size=4)
    np.testing.assert_array_equal(diag_scale(np.ones(4), S), S)
    assert not diag_scale(np.zeros(4), S).any()
    np.testing.assert_allclose(diag_scale(alpha, S), np.diag(alpha) @ S, atol=1e-15)
    with pytest.raises(ShapeMismatchError):
        diag_scale(np.ones(3), S)


def test_diag_scale_width_one_is_scalar(rng):
    S = rng.normal((4, 3))
    np.testing.assert_allclose(diag_scale([0.5], S), 0.5 * S)


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    assert not l2_normalize(np.zeros(3)).any()
    with pytest.raises(DomainError):
        l2_normalize(np.ones(2), eps=0.0)


def test_l2_normalize_unit_norm(rng):
    k = l2_normalize(rng.normal((50, 7)))
    np.testing.assert_allclose(np.linalg.norm(k, axis=-1), 1.0, atol=1e-12)


def test_elementwise_values():
    assert elementwise("sigmoid", np.array([0.0]))[0] == pytest.approx(0.5, abs=1e-15)
    assert elementwise("silu", np.array([0.0]))[0] == 0.0
    np.testing.assert_array_equal(elementwise("sqrt", np.array([4.0, 1.0])), [2.0, 1.0])
    np.testing.assert_allclose(elementwise("softplus", np.array([0.0])), [np.log(2.0)])
    with pytest.raises(DomainError):
        elementwise("sqrt", np.array([-1.0]))
    with pytest.raises(DomainError):
        elementwise("tanh", np.array([0.0]))


def test_sigmoid_stays_open_interval():
    out = sigmoid(np.array([-1e4, -40.0, 0.0, 40.0, 1e4]))
    assert np.all(out > 0.0) and np.all(out < 1.0)


@pytest.mark.parametrize("kind", ["sigmoid", "silu", "softplus", "exp"])
def test_elementwise_derivative_matches_difference(kind):
    x = np.linspace(-2.0, 2.0, 9)
    h = 1e-6
    numeric = (elementwise(kind, x + h) - elementwise(kind, x - h)) / (2 * h)
    np.testing.assert_allclose(elementwise_derivative(kind, x), numeric, rtol=1e-6, atol=1e-8)


def test_as_array_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        as_array([1.0, np.nan], "q", timestep=3)


def test_rng_reproducible():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal(1000), b.normal(1000))
    assert not np.array_equal(Rng(7).normal(10), Rng(8).normal(10))


def test_rng_spawn_is_order_independent():
    parent = Rng(3)
    first = parent.spawn(1).normal(5)
    parent.normal(100)
    np.testing.assert_array_equal(parent.spawn(1).normal(5), first)
    assert not np.array_equal(parent.spawn(2).normal(5), first)


@pytest.mark.slow
def test_rng_reproducible_million_draws():
    np.testing.assert_array_equal(Rng(11).uniform(size=10 ** 6), Rng(11).uniform(size=10 ** 6))


def test_rng_rejects_bad_seed():
    with pytest.raises(DomainError):
        Rng(-1)
