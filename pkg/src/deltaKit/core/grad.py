"""
Reverse-mode gradients through the sequential scan and a central-difference verifier.

The backward pass walks t = L…1 with the cached states S_t. At each step the
upstream gradient of S_t is the carried gradient plus q_t ⊗ dO_t (the read-out
happens after the update), and the step's transition is differentiated in
closed form for its rule family.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from deltaKit.core.exceptions import ConfigError, DomainError, ShapeMismatchError
from deltaKit.core.numerics import DTYPE, log_softmax, logit, matvec_T, outer, sigmoid, softmax
from deltaKit.core.rules import NONE, Gates, RuleKind, RuleSpec, StepInput, write_key
from deltaKit.core.scan import (
    SequenceInputs,
    SequenceOutputs,
    run_sequential,
    run_sequential_with_states,
    validate_inputs,
)

logger = logging.getLogger(__name__)

LOSS_KINDS = ("sum_squares", "cross_entropy")
INPUT_FIELDS = ("q", "k", "v", "S0")


@dataclass(frozen=True)
class SequenceGrads:
    """Gradients shaped exactly like the corresponding SequenceInputs fields."""
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dgates: Gates
    dS0: np.ndarray

    @property
    def dalpha(self) -> Optional[np.ndarray]:
        return self.dgates.alpha

    @property
    def dbeta(self) -> Optional[np.ndarray]:
        return self.dgates.beta

    @property
    def dbeta_v(self) -> Optional[np.ndarray]:
        return self.dgates.beta_v

    @property
    def dkappa(self) -> Optional[np.ndarray]:
        return self.dgates.kappa

    def __getitem__(self, name: str) -> Optional[np.ndarray]:
        if name in INPUT_FIELDS:
            return {"q": self.dq, "k": self.dk, "v": self.dv, "S0": self.dS0}[name]
        return getattr(self.dgates, name)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in INPUT_FIELDS:
            yield name, self[name]
        yield from self.dgates.items()


@dataclass(frozen=True)
class LossSpec:
    """
    Scalar test loss on a scan's outputs, averaged over (lane, step) positions.

    `sum_squares` is ½‖o_t − target_t‖² (target defaults to zero). `cross_entropy`
    projects o_t through `head` (d_v × vocab) and scores integer `target` ids.
    `state_weight` adds ½·w·‖S_L‖² per lane so the final-state path is exercised.
    """
    kind: str = "sum_squares"
    target: Optional[np.ndarray] = None
    head: Optional[np.ndarray] = None
    state_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind '{self.kind}'; expected one of {LOSS_KINDS}",
                              [{"field": "kind", "error": "unknown"}])
        if self.kind == "cross_entropy" and (self.head is None or self.target is None):
            raise ConfigError("cross_entropy loss requires both 'head' and 'target'",
                              [{"field": "head", "error": "missing"}])

    @classmethod
    def random(cls, kind: str, inputs: SequenceInputs, rng, vocab: int = 11,
               state_weight: float = 0.5) -> "LossSpec":
        """Random targets (and head) matching the inputs' output shape."""
        shape = inputs.lanes + (inputs.length,)
        if kind == "cross_entropy":
            head = rng.normal((inputs.d_v, vocab), scale=1.0 / np.sqrt(inputs.d_v))
            return cls(kind, target=rng.integers(0, vocab, shape), head=head, state_weight=state_weight)
        return cls(kind, target=rng.normal(shape + (inputs.d_v,)), state_weight=state_weight)

    def value(self, outputs: SequenceOutputs) -> float:
        O, S = outputs.O, outputs.S_final
        n = O.size // O.shape[-1]
        if self.kind == "sum_squares":
            residual = O if self.target is None else O - self.target
            total = 0.5 * np.sum(residual * residual) / n
        else:
            logp = log_softmax(O @ self.head)
            picked = np.take_along_axis(logp, np.asarray(self.target)[..., None], axis=-1)
            total = -np.sum(picked) / n
        if self.state_weight:
            total += 0.5 * self.state_weight * np.sum(S * S) / _lane_count(S)
        return float(total)

    def gradient(self, outputs: SequenceOutputs) -> Tuple[np.ndarray, np.ndarray]:
        """(dO, dS_final) of `value` with respect to the outputs."""
        O, S = outputs.O, outputs.S_final
        n = O.size // O.shape[-1]
        if self.kind == "sum_squares":
            dO = (O if self.target is None else O - self.target) / n
        else:
            probs = softmax(O @ self.head)
            np.put_along_axis(probs, np.asarray(self.target)[..., None],
                              np.take_along_axis(probs, np.asarray(self.target)[..., None], axis=-1) - 1.0,
                              axis=-1)
            dO = (probs / n) @ self.head.T
        dS = self.state_weight * S / _lane_count(S) if self.state_weight else np.zeros_like(S)
        return np.broadcast_to(dO, O.shape).astype(DTYPE), dS


def _lane_count(S: np.ndarray) -> int:
    return max(1, S.size // (S.shape[-1] * S.shape[-2]))


# ===== Backward pass =====
def backward_sequential(inputs: SequenceInputs, dO: np.ndarray, dS_final: Optional[np.ndarray] = None,
                        states: Optional[np.ndarray] = None) -> SequenceGrads:
    """
    Exact reverse-mode derivatives of Σ_t ⟨dO_t, o_t⟩ + ⟨dS_final, S_L⟩.

    Args:
        inputs: The forward inputs.
        dO: Upstream output gradient, (..., L, d_v).
        dS_final: Upstream final-state gradient, (..., d_k, d_v); zero when None.
        states: Cached post-update states from `run_sequential_with_states`;
            recomputed when None.

    Gate gradients follow the gate fields: RetNet's fixed decay and absent gates
    get None. Entries with β = 0 get a zero β-gradient since √β is not
    differentiable there.
    """
    spec = validate_inputs(inputs)
    L, d_k, d_v = inputs.length, inputs.d_k, inputs.d_v
    dO = np.asarray(dO, dtype=DTYPE)
    if dO.shape[-2:] != (L, d_v):
        raise ShapeMismatchError(f"dO has shape {dO.shape}, expected (..., {L}, {d_v})",
                                 [{"field": "dO", "error": "shape mismatch"}])
    if states is None:
        _, states = run_sequential_with_states(inputs)
    lanes = np.broadcast_shapes(states.shape[:-3], dO.shape[:-2])

    S0 = inputs.initial_state()
    carry = np.zeros(lanes + (d_k, d_v), dtype=DTYPE)
    if dS_final is not None:
        carry = carry + np.asarray(dS_final, dtype=DTYPE)

    dq = np.zeros(lanes + (L, d_k), dtype=DTYPE)
    dk = np.zeros(lanes + (L, d_k), dtype=DTYPE)
    dv = np.zeros(lanes + (L, d_v), dtype=DTYPE)
    dgates = {name: np.zeros(lanes + gate.shape[-2:], dtype=DTYPE)
              for name, gate in inputs.gates.items()
              if not (name == "alpha" and spec.alpha_fixed)}

    for t in range(L - 1, -1, -1):
        inp = inputs.step_input(t)
        S_t = states[..., t, :, :]
        S_prev = states[..., t - 1, :, :] if t > 0 else S0
        do = dO[..., t, :]
        dq[..., t, :] = np.einsum("...ij,...j->...i", S_t, do)
        G = carry + outer(inp.q, do)
        carry, step_grads = _step_backward(spec, S_prev, inp, G)
        dk[..., t, :] = step_grads.pop("k")
        dv[..., t, :] = step_grads.pop("v")
        for name, grad in step_grads.items():
            if name in dgates:
                dgates[name][..., t, :] = grad

    gate_grads = Gates(**{name: _unbroadcast(grad, getattr(inputs.gates, name).shape)
                          for name, grad in dgates.items()})
    return SequenceGrads(
        dq=_unbroadcast(dq, inputs.q.shape),
        dk=_unbroadcast(dk, inputs.k.shape),
        dv=_unbroadcast(dv, inputs.v.shape),
        dgates=gate_grads,
        dS0=_unbroadcast(carry, S0.shape),
    )


def _step_backward(spec: RuleSpec, P: np.ndarray, inp: StepInput, G: np.ndarray) -> Tuple[np.ndarray, Dict]:
    """Given dL/dS_t = G, return dL/dS_{t-1} and the step's input gradients."""
    k, v, gates = inp.k, inp.v, inp.gates
    a = gates.alpha if spec.alpha != NONE else None

    if spec.kind is RuleKind.RWKV7:
        c = gates.beta * gates.kappa
        r = matvec_T(P, gates.kappa)
        dc = -np.einsum("...ij,...j->...i", G, r)
        dr = -matvec_T(G, c)
        dP = a[..., :, None] * G + outer(gates.kappa, dr)
        return dP, {
            "k": np.einsum("...ij,...j->...i", G, v),
            "v": matvec_T(G, k),
            "alpha": _gate_sum(np.sum(G * P, axis=-1), a),
            "beta": gates.kappa * dc,
            "kappa": np.einsum("...ij,...j->...i", P, dr) + gates.beta * dc,
        }

    if not spec.delta:
        w = write_key(spec, k, gates)
        dw = np.einsum("...ij,...j->...i", G, v)
        grads = {"v": matvec_T(G, w), "k": dw}
        dP = G
        if a is not None:
            dP = a[..., :, None] * G
            grads["alpha"] = _gate_sum(np.sum(G * P, axis=-1), a)
        if spec.kind is RuleKind.HGRN2:
            grads["alpha"] = grads["alpha"] - dw
            grads["k"] = np.zeros_like(dw)
        return dP, grads

    # Delta family: S_t = D + k̃ uᵀ with D = Diag(α)S_{t-1} and u = ṽ − Dᵀk̃.
    D = P if a is None else a[..., :, None] * P
    root_k = np.sqrt(gates.beta)
    root_v = np.sqrt(gates.beta_v) if spec.beta_v else root_k
    k_tilde, v_tilde = root_k * k, root_v * v
    u = v_tilde - matvec_T(D, k_tilde)
    du = matvec_T(G, k_tilde)
    dk_tilde = np.einsum("...ij,...j->...i", G, u) - np.einsum("...ij,...j->...i", D, du)
    dD = G - outer(k_tilde, du)
    grads = {"k": root_k * dk_tilde, "v": root_v * du}
    dP = dD
    if a is not None:
        dP = a[..., :, None] * dD
        grads["alpha"] = _gate_sum(np.sum(dD * P, axis=-1), a)

    droot_k = _gate_sum(k * dk_tilde, root_k)
    droot_v = _gate_sum(v * du, root_v)
    if spec.beta_v:
        grads["beta"] = _root_grad(droot_k, root_k)
        grads["beta_v"] = _root_grad(droot_v, root_v)
    else:
        grads["beta"] = _root_grad(droot_k + droot_v, root_k)
    return dP, grads


def _gate_sum(grad: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Collapse a per-channel gradient onto a width-1 (scalar) gate."""
    if gate.shape[-1] == 1 and grad.shape[-1] != 1:
        return np.sum(grad, axis=-1, keepdims=True)
    return grad


def _root_grad(droot: np.ndarray, root: np.ndarray) -> np.ndarray:
    """Chain rule through r = √β: dβ = dr / (2r), zero where β = 0."""
    positive = root > 0
    return np.where(positive, 0.5 * droot / np.where(positive, root, 1.0), 0.0)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting added or stretched."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = np.sum(grad, axis=tuple(range(extra)))
    stretched = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if stretched:
        grad = np.sum(grad, axis=stretched, keepdims=True)
    return grad


def value_and_grad(inputs: SequenceInputs, loss: LossSpec) -> Tuple[float, SequenceGrads]:
    outputs, states = run_sequential_with_states(inputs)
    dO, dS = loss.gradient(outputs)
    return loss.value(outputs), backward_sequential(inputs, dO, dS, states=states)


# ===== Finite-difference verification =====
@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""
    tol: float
    max_rel_error: float = 0.0
    worst: Optional[Tuple[str, Tuple[int, ...]]] = None
    checked: int = 0
    skipped: int = 0
    per_field: Dict[str, float] = field(default_factory=dict)
    label: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def record(self, name: str, index: Tuple[int, ...], analytic: float, numeric: float,
               floor: float = 1e-8) -> float:
        err = relative_error(analytic, numeric, floor)
        self.checked += 1
        self.per_field[name] = max(self.per_field.get(name, 0.0), err)
        if self.worst is None or err > self.max_rel_error:
            self.max_rel_error = err
            self.worst = (name, tuple(int(i) for i in index))
        return err

    def to_dict(self) -> Dict[str, object]:
        return {
            "label": self.label,
            "passed": self.passed,
            "tol": self.tol,
            "max_rel_error": self.max_rel_error,
            "worst_field": None if self.worst is None else self.worst[0],
            "worst_index": None if self.worst is None else list(self.worst[1]),
            "checked": self.checked,
            "skipped": self.skipped,
            "per_field": dict(self.per_field),
        }


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a − f| / max(|a|, |f|, floor)."""
    return float(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))


def central_difference(objective: Callable[[np.ndarray], float], base: np.ndarray,
                       index: Tuple[int, ...], h: float) -> float:
    """(f(x + h·e_i) − f(x − h·e_i)) / 2h without mutating `base`."""
    plus = base.copy()
    plus[index] += h
    minus = base.copy()
    minus[index] -= h
    return (objective(plus) - objective(minus)) / (2.0 * h)


def finite_diff_check(inputs: SequenceInputs, loss: LossSpec, h: float = 1e-5, tol: float = 1e-5,
                      analytic: Optional[SequenceGrads] = None, floor: float = 1e-8) -> GradCheckReport:
    """
    Verify every coordinate of the analytic gradient against central differences.

    Decay and learning-rate gates are perturbed in logit space so they stay in
    (0, 1); their analytic gradients are mapped through dg/dz = g(1 − g).
    Entries sitting on the closed ends 0 or 1 have no logit and are skipped,
    as is RetNet's fixed decay. κ̂ is perturbed directly.
    """
    if h <= 0:
        raise DomainError("finite_diff_check: h must be positive", [{"field": "h", "error": "must be > 0"}])
    spec = validate_inputs(inputs)
    inputs = inputs.replace(S0=inputs.initial_state().copy())
    if analytic is None:
        _, analytic = value_and_grad(inputs, loss)
    report = GradCheckReport(tol=tol, label=spec.name)

    def objective_for(name: str) -> Callable[[np.ndarray], float]:
        def objective(candidate: np.ndarray) -> float:
            return loss.value(run_sequential(inputs.replace(**{name: candidate})))
        return objective

    for name in INPUT_FIELDS:
        base = np.array(getattr(inputs, name), dtype=DTYPE)
        objective = objective_for(name)
        grad = analytic[name]
        for index in np.ndindex(base.shape):
            report.record(name, index, grad[index], central_difference(objective, base, index, h), floor)

    for name, gate in inputs.gates.items():
        gate = np.asarray(gate, dtype=DTYPE)
        if name == "alpha" and spec.alpha_fixed:
            report.skipped += gate.size
            continue
        grad = analytic[name]
        if name == "kappa":
            objective = _gate_objective(inputs, loss, name, lambda g: g)
            for index in np.ndindex(gate.shape):
                report.record(name, index, grad[index], central_difference(objective, gate, index, h), floor)
            continue
        with np.errstate(divide="ignore"):
            z = logit(gate)
        objective = _gate_objective(inputs, loss, name, sigmoid)
        for index in np.ndindex(gate.shape):
            g = gate[index]
            if g <= 0.0 or g >= 1.0:
                report.skipped += 1
                continue
            analytic_z = grad[index] * g * (1.0 - g)
            report.record(name, index, analytic_z, central_difference(objective, z, index, h), floor)

    logger.debug(f"gradcheck rule={spec.name} max_rel_error={report.max_rel_error:.3e} "
                 f"checked={report.checked} skipped={report.skipped}")
    return report


def _gate_objective(inputs: SequenceInputs, loss: LossSpec, name: str,
                    transform: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], float]:
    def objective(candidate: np.ndarray) -> float:
        gates = inputs.gates.replace(**{name: transform(candidate)})
        return loss.value(run_sequential(inputs.replace(gates=gates)))
    return objective
