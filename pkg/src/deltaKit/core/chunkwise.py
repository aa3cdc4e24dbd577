"""
Chunkwise-parallel forward kernel for diagonal(-plus-rank-1) recurrences.

Inside a chunk starting from state S₀ with cumulative decays Γ_t = α_1 ⊙ … ⊙ α_t,
the delta family writes S_t = Diag(α_t)S_{t-1} + k̃_t u_tᵀ with the corrected
value u_t = ṽ_t − S_{t-1}ᵀ b_t. Unrolling gives the triangular system

    (I + M) U = Ṽ − (B ⊙ Γ_excl) S₀,   M[t, s] = b_tᵀ Diag(Γ_{t-1}/Γ_s) k̃_s  (s < t)

where a_t = −k̃_t and b_t = k̃_t ⊙ α_t are the DPLR factors. T = (I + M)⁻¹ is the
UT factor; W = T(B ⊙ Γ_excl) and U₀ = TṼ fold the chunk into WY form, after which

    U     = U₀ − W S₀
    S_out = Diag(Γ_C) S₀ + (K̃ ⊙ Γ_C/Γ)ᵀ U
    O     = (Q ⊙ Γ) S₀ + P U,   P[t, s] = q_tᵀ Diag(Γ_t/Γ_s) k̃_s  (s ≤ t)

Purely diagonal rules are the special case M = 0, T = I, U = V. Everything
except the S₀-dependent fold is computed for all chunks at once.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from deltaKit.core.exceptions import DomainError, GateRangeError, UnsupportedRuleError
from deltaKit.core.numerics import DTYPE
from deltaKit.core.rules import NONE, RuleSpec, dplr_factors, get_rule, scale_kv, write_key
from deltaKit.core.scan import SequenceInputs, SequenceOutputs, validate_inputs

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 64

# Decay ratios are factored as Γ_t · (1/Γ_s) while every cumulative log-decay
# stays above this floor; harder-decaying chunks use pairwise exponents instead.
_LOG_FLOOR = -600.0


@dataclass(frozen=True)
class ChunkPlan:
    """
    Precomputed per-chunk quantities for N equal-size chunks of size C.

    Arrays carry shape (..., N, C, ·). A and B are None for purely diagonal
    rules (no low-rank part); T is then the identity and is not stored.
    """
    C: int
    start: int
    q: np.ndarray
    gamma: np.ndarray
    log_gamma: np.ndarray
    log_gamma_excl: np.ndarray
    k_tilde: np.ndarray
    v_tilde: np.ndarray
    A: Optional[np.ndarray]
    B: Optional[np.ndarray]
    T: Optional[np.ndarray]
    pairwise: bool = False

    @property
    def n_chunks(self) -> int:
        return self.q.shape[-3]


@dataclass
class KernelStats:
    wall_time_s: float = 0.0
    chunks: int = 0
    chunk_size: int = 0
    flops_per_chunk: float = 0.0
    total_flops: float = 0.0

    def as_dict(self) -> dict:
        return {
            "wall_time_s": self.wall_time_s,
            "chunks": self.chunks,
            "chunk_size": self.chunk_size,
            "flops_per_chunk": self.flops_per_chunk,
            "total_flops": self.total_flops,
        }


def chunk_flops(C: int, d_k: int, d_v: int, delta: bool = True) -> float:
    """
    Floating-point operation estimate for one chunk.

    Intra-chunk pairwise products cost O(C²d), the UT solve O(C³), the state
    read/write O(C·d_k·d_v); summed over L/C chunks this is O(LCd + LC²) at fixed d.
    """
    pairwise = 2.0 * C * C * d_k * (2 if delta else 1)
    solve = C ** 3 / 3.0 if delta else 0.0
    wy = 2.0 * C * C * (d_k + d_v) if delta else 0.0
    state = 2.0 * C * d_k * d_v * (4 if delta else 3)
    return pairwise + solve + wy + state


def cumulative_decay(alphas: np.ndarray) -> np.ndarray:
    """Inclusive running product over the chunk axis: row t = α_1 ⊙ … ⊙ α_t."""
    alphas = np.asarray(alphas, dtype=DTYPE)
    if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
        raise GateRangeError("cumulative_decay: decay entries must lie in (0, 1]",
                             [{"field": "alpha", "error": "out of range (0, 1]"}])
    return np.cumprod(alphas, axis=-2)


def ut_transform(M: np.ndarray) -> np.ndarray:
    """
    T = (I + M)⁻¹ for strictly lower-triangular M by forward substitution.

    Row i of T is e_i − Σ_{j<i} M[i, j] T[j, :]; T is unit lower triangular.
    """
    M = np.asarray(M, dtype=DTYPE)
    C = M.shape[-1]
    if M.shape[-2] != C:
        raise DomainError("ut_transform: M must be square", [{"field": "M", "error": "not square"}])
    if np.any(np.triu(M) != 0.0):
        raise DomainError("ut_transform: M must be strictly lower triangular",
                          [{"field": "M", "error": "non-zero on or above the diagonal"}])
    T = np.zeros_like(M)
    idx = np.arange(C)
    T[..., idx, idx] = 1.0
    for i in range(1, C):
        T[..., i, :i] = -np.matmul(M[..., i:i + 1, :i], T[..., :i, :i])[..., 0, :]
    return T


def _full_alpha(spec: RuleSpec, inputs: SequenceInputs) -> np.ndarray:
    shape = inputs.q.shape
    if spec.alpha == NONE:
        return np.ones(shape, dtype=DTYPE)
    return np.broadcast_to(np.asarray(inputs.gates.alpha, dtype=DTYPE), shape)


def _to_chunks(x: np.ndarray, n: int, C: int) -> np.ndarray:
    return x.reshape(x.shape[:-2] + (n, C, x.shape[-1]))


def build_plans(inputs: SequenceInputs, C: int) -> List[ChunkPlan]:
    """
    Split the sequence into ⌊L/C⌋ full chunks (one plan) and a ragged tail (a second
    plan of size L mod C). The tail runs through the same code path at reduced C.
    """
    spec = _require_chunkwise(inputs.rule)
    L = inputs.length
    alpha = _full_alpha(spec, inputs)
    if spec.delta:
        k_tilde, v_tilde = scale_kv(spec, inputs.k, inputs.v, inputs.gates)
    else:
        k_tilde, v_tilde = write_key(spec, inputs.k, inputs.gates), np.asarray(inputs.v, dtype=DTYPE)
        k_tilde = np.broadcast_to(k_tilde, inputs.q.shape)

    plans = []
    n_full, tail = divmod(L, C)
    for start, n, size in ((0, n_full, C), (n_full * C, 1 if tail else 0, tail)):
        if n == 0:
            continue
        stop = start + n * size
        plans.append(_plan(
            spec, size, start,
            q=_to_chunks(np.asarray(inputs.q[..., start:stop, :], dtype=DTYPE), n, size),
            alpha=_to_chunks(alpha[..., start:stop, :], n, size),
            k_tilde=_to_chunks(k_tilde[..., start:stop, :], n, size),
            v_tilde=_to_chunks(v_tilde[..., start:stop, :], n, size),
        ))
    return plans


def _plan(spec: RuleSpec, C: int, start: int, q, alpha, k_tilde, v_tilde) -> ChunkPlan:
    gamma = cumulative_decay(alpha)
    log_gamma = np.cumsum(np.log(alpha), axis=-2)
    # decay accumulated before step t: Γ_{t-1}
    log_gamma_excl = log_gamma - np.log(alpha)
    pairwise = bool(np.min(log_gamma) < _LOG_FLOOR)
    A = B = T = None
    if spec.delta:
        A, B = dplr_factors(k_tilde, alpha)
        M = _decay_product(B, -A, log_gamma_excl, log_gamma, gamma, strict=True, pairwise=pairwise)
        T = ut_transform(M)
    return ChunkPlan(C=C, start=start, q=q, gamma=gamma, log_gamma=log_gamma,
                     log_gamma_excl=log_gamma_excl, k_tilde=k_tilde,
                     v_tilde=v_tilde, A=A, B=B, T=T, pairwise=pairwise)


def _decay_product(left, right, log_left, log_right, gamma_right, strict: bool, pairwise: bool) -> np.ndarray:
    """
    P[t, s] = Σ_i left[t, i] · exp(log_left[t, i] − log_right[s, i]) · right[s, i] on the
    causal triangle (s < t if strict else s ≤ t), zero elsewhere.
    """
    C = left.shape[-2]
    mask = np.tril(np.ones((C, C), dtype=bool), k=-1 if strict else 0)
    if not pairwise:
        scaled_left = left * np.exp(log_left)
        scaled_right = right / gamma_right
        return np.where(mask, np.matmul(scaled_left, np.swapaxes(scaled_right, -1, -2)), 0.0)
    diff = log_left[..., :, None, :] - log_right[..., None, :, :]
    diff = np.where(mask[..., None], diff, -np.inf)
    ratio = np.exp(diff)
    return np.einsum("...ti,...tsi,...si->...ts", left, ratio, right)


def chunk_forward(S_in: np.ndarray, plan: ChunkPlan, rule) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run the plan's chunks from state S_in.

    Returns:
        (O, S_out) with O shaped (..., N·C, d_v).
    """
    spec = _require_chunkwise(rule)
    q, gamma, log_gamma = plan.q, plan.gamma, plan.log_gamma
    k_tilde, v_tilde = plan.k_tilde, plan.v_tilde

    # Output pairwise term, inclusive causal triangle.
    P = _decay_product(q, k_tilde, log_gamma, log_gamma, gamma, strict=False, pairwise=plan.pairwise)
    q_decayed = q * gamma
    # Keys decayed to the chunk end: Γ_C / Γ_s ≤ 1.
    k_to_end = k_tilde * np.exp(log_gamma[..., -1:, :] - log_gamma)
    gamma_end = gamma[..., -1, :]

    if spec.delta:
        b_decayed = plan.B * np.exp(plan.log_gamma_excl)
        W = np.matmul(plan.T, b_decayed)
        U0 = np.matmul(plan.T, v_tilde)
    else:
        W = None
        U0 = v_tilde

    S = np.asarray(S_in, dtype=DTYPE)
    lanes = np.broadcast_shapes(S.shape[:-2], q.shape[:-3])
    S = np.broadcast_to(S, lanes + S.shape[-2:]).copy()
    O = np.empty(lanes + (plan.n_chunks, plan.C, v_tilde.shape[-1]), dtype=DTYPE)
    for n in range(plan.n_chunks):
        U = U0[..., n, :, :] if W is None else U0[..., n, :, :] - np.matmul(W[..., n, :, :], S)
        O[..., n, :, :] = np.matmul(q_decayed[..., n, :, :], S) + np.matmul(P[..., n, :, :], U)
        S = gamma_end[..., n, :, None] * S + np.matmul(np.swapaxes(k_to_end[..., n, :, :], -1, -2), U)
    return O.reshape(lanes + (plan.n_chunks * plan.C, v_tilde.shape[-1])), S


def run_chunkwise(inputs: SequenceInputs, C: int = DEFAULT_CHUNK_SIZE) -> Tuple[SequenceOutputs, KernelStats]:
    """
    Chunkwise-parallel forward pass; agrees with `run_sequential` to ~1e-10 in double.

    A chunk size larger than L is clamped to L.
    """
    if C < 1:
        raise DomainError("chunk size must be >= 1", [{"field": "C", "error": "must be positive"}])
    spec = _require_chunkwise(inputs.rule)
    validate_inputs(inputs)
    L = inputs.length
    C = min(C, L)
    started = time.perf_counter()
    S = inputs.initial_state()
    pieces = []
    stats = KernelStats(chunk_size=C, flops_per_chunk=chunk_flops(C, inputs.d_k, inputs.d_v, spec.delta))
    for plan in build_plans(inputs, C):
        O_part, S = chunk_forward(S, plan, spec)
        pieces.append(O_part)
        stats.chunks += plan.n_chunks
        stats.total_flops += plan.n_chunks * chunk_flops(plan.C, inputs.d_k, inputs.d_v, spec.delta)
    O = pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=-2)
    stats.wall_time_s = time.perf_counter() - started
    logger.debug(f"chunkwise rule={spec.name} L={L} C={C} chunks={stats.chunks} "
                 f"wall={stats.wall_time_s:.4f}s")
    return SequenceOutputs(O=O, S_final=S), stats


def _require_chunkwise(rule) -> RuleSpec:
    spec = get_rule(rule)
    if not spec.chunkwise:
        raise UnsupportedRuleError(
            f"chunkwise unsupported for rule '{spec.name}'; use the sequential scan",
            [{"field": "rule", "error": "chunkwise unsupported"}],
        )
    return spec
