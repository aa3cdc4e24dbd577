import numpy as np
import pytest

from deltaKit.core.chunkwise import (
    build_plans,
    chunk_flops,
    chunk_forward,
    cumulative_decay,
    run_chunkwise,
    ut_transform,
)
from deltaKit.core.exceptions import DomainError, GateRangeError, UnsupportedRuleError
from deltaKit.core.rules import CHUNKWISE_RULES, Gates, step
from deltaKit.core.scan import run_sequential

TOL = 1e-10


def _diffs(inputs, C):
    chunked, stats = run_chunkwise(inputs, C)
    reference = run_sequential(inputs)
    return (float(np.max(np.abs(chunked.O - reference.O))),
            float(np.max(np.abs(chunked.S_final - reference.S_final))), stats)


def test_cumulative_decay_examples():
    np.testing.assert_array_equal(cumulative_decay(np.ones((3, 2))), np.ones((3, 2)))
    np.testing.assert_array_equal(cumulative_decay(np.array([[0.3, 0.6]])), [[0.3, 0.6]])
    np.testing.assert_allclose(cumulative_decay(np.array([[0.5, 1.0], [0.5, 0.5]])), [[0.5, 1.0], [0.25, 0.5]])


@pytest.mark.parametrize("bad", [0.0, 1.5, -0.2])
def test_cumulative_decay_rejects_out_of_range(bad):
    with pytest.raises(GateRangeError):
        cumulative_decay(np.array([[0.5], [bad]]))


def test_ut_transform_trivial():
    np.testing.assert_array_equal(ut_transform(np.zeros((4, 4))), np.eye(4))
    np.testing.assert_array_equal(ut_transform(np.zeros((1, 1))), [[1.0]])


def test_ut_transform_inverts(rng):
    M = np.tril(rng.normal((16, 16)) * 0.2, k=-1)
    T = ut_transform(M)
    np.testing.assert_allclose(np.diag(T), 1.0)
    assert not np.triu(T, k=1).any()
    assert np.max(np.abs((np.eye(16) + M) @ T - np.eye(16))) <= 1e-12


def test_ut_transform_batched(rng):
    M = np.tril(rng.normal((3, 5, 5)) * 0.3, k=-1)
    T = ut_transform(M)
    for i in range(3):
        np.testing.assert_allclose(T[i], np.linalg.inv(np.eye(5) + M[i]), atol=1e-12)


def test_ut_transform_rejects_non_triangular():
    with pytest.raises(DomainError):
        ut_transform(np.ones((3, 3)))
    with pytest.raises(DomainError):
        ut_transform(np.zeros((3, 4)))


@pytest.mark.parametrize("rule", CHUNKWISE_RULES)
@pytest.mark.parametrize("L", [1, 5, 64])
@pytest.mark.parametrize("C", [1, 3, 16, 64])
def test_oracle_equivalence(make_inputs, rule, L, C):
    for seed in range(2):
        diff_O, diff_S, _ = _diffs(make_inputs(rule, L, 16, seed=seed), C)
        assert diff_O <= TOL and diff_S <= TOL


@pytest.mark.slow
@pytest.mark.parametrize("rule", CHUNKWISE_RULES)
def test_oracle_equivalence_full_matrix(make_inputs, rule):
    for L in (1, 5, 64, 257, 1024):
        for C in sorted({min(C, L) for C in (1, 2, 3, 16, 64, L)}):
            for seed in range(20):
                diff_O, diff_S, _ = _diffs(make_inputs(rule, L, 16, seed=seed), C)
                assert diff_O <= TOL and diff_S <= TOL, (L, C, seed)


def test_ragged_tail(make_inputs):
    diff_O, diff_S, stats = _diffs(make_inputs("fg2gdn_plus", 257, 16, seed=9), 64)
    assert diff_O <= TOL and diff_S <= TOL
    assert stats.chunks == 5 and stats.chunk_size == 64


def test_chunk_of_one_matches_single_step(make_inputs):
    inputs = make_inputs("fg2gdn", 1, 8, seed=2)
    chunked, _ = run_chunkwise(inputs, 1)
    S, o = step("fg2gdn", inputs.S0, inputs.step_input(0))
    np.testing.assert_allclose(chunked.O[0], o, atol=1e-12)
    np.testing.assert_allclose(chunked.S_final, S, atol=1e-12)


def test_ungated_deltanet(make_inputs):
    inputs = make_inputs("deltanet", 48, 8, seed=4)
    inputs = inputs.replace(rule="kda", gates=Gates(alpha=np.ones((48, 8)), beta=inputs.gates.beta))
    diff_O, diff_S, _ = _diffs(inputs, 16)
    assert diff_O <= TOL and diff_S <= TOL


def test_chunk_size_invariance(make_inputs):
    inputs = make_inputs("fg2gdn", 200, 16, seed=6)
    a, _ = run_chunkwise(inputs, 16)
    b, _ = run_chunkwise(inputs, 64)
    assert np.max(np.abs(a.O - b.O)) <= 2 * TOL


def test_chunk_size_clamped_to_length(make_inputs):
    inputs = make_inputs("kda", 10, 8, seed=1)
    _, stats = run_chunkwise(inputs, 64)
    assert stats.chunk_size == 10 and stats.chunks == 1


@pytest.mark.parametrize("rule", ["retnet", "gla", "fg2gdn_plus"])
def test_batch_and_head_lanes(make_inputs, rule):
    diff_O, diff_S, _ = _diffs(make_inputs(rule, 40, 8, lanes=(2, 3), seed=8), 16)
    assert diff_O <= TOL and diff_S <= TOL


def test_unequal_value_width(make_inputs):
    diff_O, diff_S, _ = _diffs(make_inputs("kda", 33, 8, d_v=5, seed=3), 8)
    assert diff_O <= TOL and diff_S <= TOL


def test_hard_decay_uses_pairwise_path(make_inputs):
    inputs = make_inputs("gla", 128, 8, seed=5)
    inputs = inputs.replace(gates=Gates(alpha=np.full((128, 8), 1e-4)))
    plans = build_plans(inputs, 128)
    assert plans[0].pairwise
    diff_O, diff_S, _ = _diffs(inputs, 128)
    assert diff_O <= TOL and diff_S <= TOL


def test_plan_structure(make_inputs):
    inputs = make_inputs("fg2gdn", 20, 6, seed=0)
    plans = build_plans(inputs, 8)
    assert [(p.start, p.C, p.n_chunks) for p in plans] == [(0, 8, 2), (16, 4, 1)]
    plan = plans[0]
    np.testing.assert_array_equal(plan.A, -plan.k_tilde)
    alpha = inputs.gates.alpha[:16].reshape(2, 8, 6)
    np.testing.assert_allclose(plan.B, plan.k_tilde * alpha)
    assert np.all(np.diff(plan.gamma, axis=-2) <= 0.0)
    np.testing.assert_array_equal(np.diagonal(plan.T, axis1=-2, axis2=-1), 1.0)
    assert not np.triu(plan.T, k=1).any()


def test_chunk_forward_matches_sequential_window(make_inputs):
    inputs = make_inputs("gdn", 16, 6, seed=12)
    plan = build_plans(inputs, 16)[0]
    O, S = chunk_forward(inputs.S0, plan, "gdn")
    reference = run_sequential(inputs)
    assert np.max(np.abs(O - reference.O)) <= TOL
    assert np.max(np.abs(S - reference.S_final)) <= TOL


def test_rwkv7_is_rejected(make_inputs):
    with pytest.raises(UnsupportedRuleError, match="chunkwise unsupported"):
        run_chunkwise(make_inputs("rwkv7", 8, 4), 4)


def test_invalid_chunk_size(make_inputs):
    with pytest.raises(DomainError):
        run_chunkwise(make_inputs("kda", 8, 4), 0)


def test_stats_flop_estimate(make_inputs):
    _, stats = run_chunkwise(make_inputs("fg2gdn", 64, 16), 16)
    assert stats.chunks == 4
    assert stats.total_flops == pytest.approx(4 * chunk_flops(16, 16, 16))
    assert stats.wall_time_s >= 0.0
    assert set(stats.as_dict()) == {"wall_time_s", "chunks", "chunk_size", "flops_per_chunk", "total_flops"}


def test_flops_scale_affinely_in_chunk_size():
    # total flops over a fixed L grow like L·C·d + L·C² (per chunk × L/C chunks)
    L, d = 4096, 64
    totals = [L // C * chunk_flops(C, d, d) for C in (16, 32, 64, 128)]
    assert all(b > a for a, b in zip(totals, totals[1:]))
    assert totals[-1] / totals[0] < 128 / 16 * 4
