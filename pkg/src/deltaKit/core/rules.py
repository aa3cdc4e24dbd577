"""
State-update rule registry and single-step transitions.

Every rule writes S_t = A_t S_{t-1} + (write term) and reads o_t = S_tᵀ q_t
after the update. The delta family absorbs its learning rate symmetrically
into keys and values (k̃ = √β ⊙ k, ṽ = √β ⊙ v) so that the transition stays
(I − k̃k̃ᵀ)Diag(α): a diagonal plus a rank-1 correction.
"""
import logging
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from deltaKit.core.exceptions import (
    GateRangeError,
    MissingGateError,
    NonFiniteError,
    ShapeMismatchError,
    UnknownRuleError,
)
from deltaKit.core.numerics import (
    DTYPE,
    Matrix,
    Vector,
    diag_scale,
    elementwise,
    householder_apply,
    matvec_T,
    outer,
)

logger = logging.getLogger(__name__)


class RuleKind(str, Enum):
    LINEAR = "linear"
    RETNET = "retnet"
    MAMBA2 = "mamba2"
    GLA = "gla"
    RWKV6 = "rwkv6"
    HGRN2 = "hgrn2"
    DELTANET = "deltanet"
    RWKV7 = "rwkv7"
    GDN = "gdn"
    KDA = "kda"
    FG2GDN = "fg2gdn"
    FG2GDN_PLUS = "fg2gdn_plus"


# Gate arity tags
NONE, SCALAR, VECTOR = "none", "scalar", "vector"


@dataclass(frozen=True)
class RuleSpec:
    kind: RuleKind
    display: str
    transition: str          # identity | scalar | diagonal | diag.+low-rank
    delta: bool
    chunkwise: bool
    alpha: str = NONE        # decay arity
    alpha_fixed: bool = False
    beta: str = NONE         # learning-rate arity (β, β^k, or RWKV-7's β⃗)
    beta_v: bool = False     # separate value-side β^v
    kappa: bool = False      # RWKV-7 removal direction κ̂
    formula: str = ""

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def scales_kv(self) -> bool:
        """True when k and v are pre-scaled by √β before the update."""
        return self.delta and self.kind is not RuleKind.RWKV7

    @property
    def equal_kv_dims(self) -> bool:
        return self.kind in (RuleKind.FG2GDN, RuleKind.FG2GDN_PLUS)

    def gate_width(self, arity: str, d_k: int) -> int:
        return {NONE: 0, SCALAR: 1, VECTOR: d_k}[arity]


RULES: Dict[RuleKind, RuleSpec] = {
    spec.kind: spec for spec in (
        RuleSpec(RuleKind.LINEAR, "Linear Attention", "identity", False, True,
                 formula="S_t = S_{t-1} + k_t v_t^T"),
        RuleSpec(RuleKind.RETNET, "RetNet", "scalar", False, True, alpha=SCALAR, alpha_fixed=True,
                 formula="S_t = gamma S_{t-1} + k_t v_t^T"),
        RuleSpec(RuleKind.MAMBA2, "Mamba-2", "scalar", False, True, alpha=SCALAR,
                 formula="S_t = alpha_t S_{t-1} + k_t v_t^T"),
        RuleSpec(RuleKind.GLA, "GLA", "diagonal", False, True, alpha=VECTOR,
                 formula="S_t = Diag(alpha_t) S_{t-1} + k_t v_t^T"),
        RuleSpec(RuleKind.RWKV6, "RWKV-6", "diagonal", False, True, alpha=VECTOR,
                 formula="S_t = Diag(alpha_t) S_{t-1} + k_t v_t^T"),
        RuleSpec(RuleKind.HGRN2, "HGRN-2", "diagonal", False, True, alpha=VECTOR,
                 formula="S_t = Diag(alpha_t) S_{t-1} + (1 - alpha_t) v_t^T"),
        RuleSpec(RuleKind.DELTANET, "DeltaNet", "diag.+low-rank", True, True, beta=SCALAR,
                 formula="S_t = (I - beta_t k_t k_t^T) S_{t-1} + beta_t k_t v_t^T"),
        RuleSpec(RuleKind.RWKV7, "RWKV-7", "diag.+low-rank", True, False, alpha=VECTOR, beta=VECTOR,
                 kappa=True,
                 formula="S_t = (Diag(alpha_t) - (beta_t * kappa_t) kappa_t^T) S_{t-1} + k_t v_t^T"),
        RuleSpec(RuleKind.GDN, "Gated DeltaNet", "diag.+low-rank", True, True, alpha=SCALAR, beta=SCALAR,
                 formula="S_t = (I - beta_t k_t k_t^T) alpha_t S_{t-1} + beta_t k_t v_t^T"),
        RuleSpec(RuleKind.KDA, "Kimi Delta Attention", "diag.+low-rank", True, True, alpha=VECTOR,
                 beta=SCALAR,
                 formula="S_t = (I - beta_t k_t k_t^T) Diag(alpha_t) S_{t-1} + beta_t k_t v_t^T"),
        RuleSpec(RuleKind.FG2GDN, "FG2-GDN", "diag.+low-rank", True, True, alpha=VECTOR, beta=VECTOR,
                 formula="S_t = (I - k~_t k~_t^T) Diag(alpha_t) S_{t-1} + k~_t v~_t^T"),
        RuleSpec(RuleKind.FG2GDN_PLUS, "FG2-GDN+", "diag.+low-rank", True, True, alpha=VECTOR,
                 beta=VECTOR, beta_v=True,
                 formula="S_t = (I - k^_t k^_t^T) Diag(alpha_t) S_{t-1} + k^_t v~_t^T"),
    )
}

RULE_NAMES: Tuple[str, ...] = tuple(kind.value for kind in RULES)
CHUNKWISE_RULES: Tuple[str, ...] = tuple(s.name for s in RULES.values() if s.chunkwise)
DELTA_RULES: Tuple[str, ...] = tuple(s.name for s in RULES.values() if s.delta)


def get_rule(kind: Union[str, RuleKind, RuleSpec]) -> RuleSpec:
    """Resolve a rule name (CLI/config string), enum member or spec to its RuleSpec."""
    if isinstance(kind, RuleSpec):
        return kind
    try:
        return RULES[RuleKind(kind)]
    except ValueError:
        valid = ", ".join(RULE_NAMES)
        raise UnknownRuleError(
            f"unknown rule '{kind}'; valid rules: {valid}",
            [{"field": "rule", "error": f"expected one of: {valid}"}],
        ) from None


def retnet_gamma(head: int) -> float:
    """Fixed RetNet decay for head h: 1 − 2^(−5−h)."""
    return 1.0 - 2.0 ** (-5 - head)


def rule_catalog() -> List[Dict[str, object]]:
    """Machine-readable rendering of the update-rule taxonomy."""
    return [
        {
            "name": spec.name,
            "model": spec.display,
            "transition": spec.transition,
            "delta": spec.delta,
            "chunkwise": spec.chunkwise,
            "update": spec.formula,
        }
        for spec in RULES.values()
    ]


# ===== Gates =====
@dataclass(frozen=True)
class Gates:
    """
    Gate arrays for one step (shape (..., w)) or a sequence (shape (..., L, w)).

    Scalar gates use width w = 1 and broadcast against d_k-wide gates. Field
    meaning per rule: `alpha` is the decay; `beta` is the scalar β, the channel
    β, FG2-GDN+'s β^k, or RWKV-7's β⃗; `beta_v` is FG2-GDN+'s value scale;
    `kappa` is RWKV-7's unit removal direction κ̂.
    """
    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    beta_v: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None

    def at(self, t: int) -> "Gates":
        """Slice timestep t out of sequence-shaped gates."""
        return Gates(**{f.name: None if getattr(self, f.name) is None else getattr(self, f.name)[..., t, :]
                        for f in fields(self)})

    def window(self, start: int, stop: int) -> "Gates":
        return Gates(**{f.name: None if getattr(self, f.name) is None else getattr(self, f.name)[..., start:stop, :]
                        for f in fields(self)})

    def replace(self, **changes) -> "Gates":
        return replace(self, **changes)

    def items(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                yield f.name, value


# Backwards-readable alias: a single step's gates.
StepGates = Gates


@dataclass(frozen=True)
class StepInput:
    q: Vector
    k: Vector
    v: Vector
    gates: Gates


def required_gates(kind) -> Dict[str, str]:
    """Gate field -> arity for the fields the rule consumes."""
    spec = get_rule(kind)
    required = {}
    if spec.alpha != NONE:
        required["alpha"] = spec.alpha
    if spec.beta != NONE:
        required["beta"] = spec.beta
    if spec.beta_v:
        required["beta_v"] = VECTOR
    if spec.kappa:
        required["kappa"] = VECTOR
    return required


def validate_gates(kind, gates: Gates, d_k: int, d_v: Optional[int] = None) -> None:
    """
    Check that exactly the rule's gate fields are present with the right widths and ranges.

    Decay and learning-rate entries must lie in [0, 1]; the open interval is the
    model's operating range, the closed ends are admitted for the reduction
    identities (α = 1, β = 0 or 1).
    """
    spec = get_rule(kind)
    required = required_gates(spec)
    errors = []
    for name, arity in required.items():
        value = getattr(gates, name)
        if value is None:
            raise MissingGateError(f"rule '{spec.name}' requires gate '{name}'",
                                   [{"field": name, "error": "missing"}])
        width = spec.gate_width(arity, d_k)
        if value.shape[-1] != width:
            errors.append({"field": name, "error": f"width {value.shape[-1]} != expected {width}"})
    if errors:
        raise ShapeMismatchError(f"gate shape mismatch for rule '{spec.name}'", errors)
    for name, value in gates.items():
        if name not in required:
            continue
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"gate '{name}' contains NaN or Inf")
        if name != "kappa" and (np.any(value < 0.0) or np.any(value > 1.0)):
            raise GateRangeError(f"gate '{name}' has entries outside [0, 1]",
                                 [{"field": name, "error": "out of range"}])
    if spec.equal_kv_dims and d_v is not None and d_v != d_k:
        raise ShapeMismatchError(
            f"rule '{spec.name}' requires d_k == d_v (got {d_k} and {d_v})",
            [{"field": "v", "error": "value dimension must equal key dimension"}],
        )


# ===== Transitions =====
def scale_kv(kind, k: Vector, v: Vector, gates: Gates) -> Tuple[Vector, Vector]:
    """
    Pre-scale keys and values by the square-rooted learning rate.

    FG2-GDN: (√β ⊙ k, √β ⊙ v); FG2-GDN+: (√β^k ⊙ k, √β^v ⊙ v); scalar-β delta
    rules: (√β k, √β v). Every other rule returns (k, v) unchanged.
    """
    spec = get_rule(kind)
    k = np.asarray(k, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if not spec.scales_kv:
        return k, v
    if gates.beta is None:
        raise MissingGateError(f"rule '{spec.name}' requires gate 'beta'", [{"field": "beta", "error": "missing"}])
    if spec.equal_kv_dims and k.shape[-1] != v.shape[-1]:
        raise ShapeMismatchError(f"rule '{spec.name}' requires len(k) == len(v)",
                                 [{"field": "v", "error": "value dimension must equal key dimension"}])
    sqrt_bk = _sqrt_gate(gates.beta, "beta")
    if spec.beta_v:
        if gates.beta_v is None:
            raise MissingGateError("rule 'fg2gdn_plus' requires gate 'beta_v'",
                                   [{"field": "beta_v", "error": "missing"}])
        sqrt_bv = _sqrt_gate(gates.beta_v, "beta_v")
    else:
        sqrt_bv = sqrt_bk
    return sqrt_bk * k, sqrt_bv * v


def _sqrt_gate(value: np.ndarray, name: str) -> np.ndarray:
    value = np.asarray(value, dtype=DTYPE)
    if np.any(value < 0.0):
        raise GateRangeError(f"gate '{name}' has negative entries", [{"field": name, "error": "negative"}])
    return elementwise("sqrt", value)


def write_key(kind, k: Vector, gates: Gates) -> Vector:
    """Key of the additive write term: 1 − α for HGRN-2, k otherwise."""
    if get_rule(kind).kind is RuleKind.HGRN2:
        return 1.0 - np.asarray(gates.alpha, dtype=DTYPE)
    return np.asarray(k, dtype=DTYPE)


def dplr_factors(k_scaled: Vector, alpha: Optional[Vector]) -> Tuple[Vector, Vector]:
    """
    Diagonal-plus-low-rank factors of (I − k̃k̃ᵀ)Diag(α): a = −k̃, b = k̃ ⊙ α.

    With these, Diag(α) + a bᵀ equals (I − k̃k̃ᵀ)Diag(α). `alpha=None` means α = 1.
    """
    k_scaled = np.asarray(k_scaled, dtype=DTYPE)
    if alpha is None:
        return -k_scaled, k_scaled.copy()
    alpha = np.asarray(alpha, dtype=DTYPE)
    if alpha.shape[-1] not in (1, k_scaled.shape[-1]):
        raise ShapeMismatchError(
            f"dplr_factors: len(alpha)={alpha.shape[-1]} does not match len(k)={k_scaled.shape[-1]}",
            [{"field": "alpha", "error": "dimension mismatch"}],
        )
    return -k_scaled, k_scaled * alpha


def learning_rate_matrix(beta: Vector) -> Matrix:
    """Per-coordinate learning-rate matrix η = √β √βᵀ (symmetric, rank ≤ 1, PSD)."""
    root = _sqrt_gate(beta, "beta")
    return outer(root, root)


def step(kind, S: Matrix, inp: StepInput, timestep: Optional[int] = None,
         validate: bool = True) -> Tuple[Matrix, Vector]:
    """
    Advance the state by one timestep and read the output from the updated state.

    Args:
        kind: Rule name or RuleKind.
        S: State of shape (..., d_k, d_v).
        inp: Query, key, value and gates for this step.
        timestep: Position reported in NonFiniteError messages.
        validate: Check shapes and gate ranges first (scan validates once per sequence).

    Returns:
        (S_next, o) with o = S_nextᵀ q.
    """
    spec = get_rule(kind)
    S = np.asarray(S, dtype=DTYPE)
    q, k, v, gates = inp.q, inp.k, inp.v, inp.gates
    if validate:
        _validate_step(spec, S, q, k, v, gates)

    decayed = S if gates.alpha is None or spec.alpha == NONE else diag_scale(gates.alpha, S)
    if spec.kind is RuleKind.RWKV7:
        removal = gates.beta * gates.kappa
        S_next = decayed - outer(removal, matvec_T(S, gates.kappa)) + outer(k, v)
    elif spec.delta:
        k_tilde, v_tilde = scale_kv(spec, k, v, gates)
        S_next = householder_apply(decayed, k_tilde) + outer(k_tilde, v_tilde)
    else:
        S_next = decayed + outer(write_key(spec, k, gates), v)

    o = matvec_T(S_next, q)
    if not (np.all(np.isfinite(S_next)) and np.all(np.isfinite(o))):
        raise NonFiniteError(f"rule '{spec.name}' produced NaN/Inf", timestep=timestep)
    return S_next, o


def _validate_step(spec: RuleSpec, S, q, k, v, gates: Gates) -> None:
    if S.ndim < 2:
        raise ShapeMismatchError("state must have shape (..., d_k, d_v)", [{"field": "S", "error": "rank < 2"}])
    d_k, d_v = S.shape[-2], S.shape[-1]
    errors = []
    if np.shape(q)[-1] != d_k:
        errors.append({"field": "q", "error": f"length {np.shape(q)[-1]} != d_k {d_k}"})
    if np.shape(k)[-1] != d_k:
        errors.append({"field": "k", "error": f"length {np.shape(k)[-1]} != d_k {d_k}"})
    if np.shape(v)[-1] != d_v:
        errors.append({"field": "v", "error": f"length {np.shape(v)[-1]} != d_v {d_v}"})
    if errors:
        raise ShapeMismatchError(f"dimension mismatch for rule '{spec.name}'", errors)
    validate_gates(spec, gates, d_k, d_v)


# ===== Online-learning diagnostics =====
def correlation_loss(S: Matrix, k: Vector, v: Vector) -> np.ndarray:
    """Unbounded correlation objective −⟨Sᵀk, v⟩ whose unit gradient step is linear attention."""
    return -np.sum(matvec_T(S, k) * np.asarray(v, dtype=DTYPE), axis=-1)


def reconstruction_loss(S: Matrix, k: Vector, v: Vector) -> np.ndarray:
    """Reconstruction objective ½‖Sᵀk − v‖² whose gradient step with rate β is the delta rule."""
    residual = matvec_T(S, k) - np.asarray(v, dtype=DTYPE)
    return 0.5 * np.sum(residual * residual, axis=-1)


def reconstruction_grad(S: Matrix, k: Vector, v: Vector) -> Matrix:
    """∇_S ½‖Sᵀk − v‖² = k (Sᵀk − v)ᵀ."""
    return outer(k, matvec_T(S, k) - np.asarray(v, dtype=DTYPE))


def per_coordinate_update(S: Matrix, k: Vector, v: Vector, beta: Vector,
                          alpha: Optional[Vector] = None) -> Matrix:
    """Elementwise learning-rate form D − η ⊙ (k kᵀ D − k vᵀ) with η = √β√βᵀ, D = Diag(α)S."""
    decayed = np.asarray(S, dtype=DTYPE) if alpha is None else diag_scale(alpha, S)
    eta = learning_rate_matrix(beta)
    return decayed - eta * reconstruction_grad(decayed, k, v)
