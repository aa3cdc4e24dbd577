"""
Sequential recurrence engine: folds `rules.step` over a whole sequence.

This is the correctness oracle for the chunkwise kernel and the forward path
used by training. Leading axes of every array are independent lanes
(batch, head) and run in the same vectorized step.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from deltaKit.core.exceptions import ShapeMismatchError
from deltaKit.core.numerics import DTYPE, Rng, check_finite, l2_normalize, sigmoid
from deltaKit.core.rules import (
    Gates,
    RuleSpec,
    StepInput,
    get_rule,
    required_gates,
    retnet_gamma,
    step,
    validate_gates,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SequenceInputs:
    """
    Queries/keys (..., L, d_k), values (..., L, d_v), gates with a time axis at -2,
    and an optional initial state (..., d_k, d_v) that defaults to zeros.
    """
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    gates: Gates
    rule: str
    S0: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.q.shape[-2]

    @property
    def d_k(self) -> int:
        return self.q.shape[-1]

    @property
    def d_v(self) -> int:
        return self.v.shape[-1]

    @property
    def lanes(self) -> Tuple[int, ...]:
        return self.q.shape[:-2]

    def initial_state(self) -> np.ndarray:
        if self.S0 is not None:
            return np.asarray(self.S0, dtype=DTYPE)
        return np.zeros(self.lanes + (self.d_k, self.d_v), dtype=DTYPE)

    def step_input(self, t: int) -> StepInput:
        return StepInput(self.q[..., t, :], self.k[..., t, :], self.v[..., t, :], self.gates.at(t))

    def window(self, start: int, stop: int, S0: Optional[np.ndarray] = None) -> "SequenceInputs":
        """Sub-sequence [start, stop) starting from state S0."""
        return replace(self, q=self.q[..., start:stop, :], k=self.k[..., start:stop, :],
                       v=self.v[..., start:stop, :], gates=self.gates.window(start, stop), S0=S0)

    def replace(self, **changes) -> "SequenceInputs":
        return replace(self, **changes)


@dataclass(frozen=True)
class SequenceOutputs:
    O: np.ndarray
    S_final: np.ndarray


def validate_inputs(inputs: SequenceInputs) -> RuleSpec:
    """Check the sequence-level invariants once so the per-step fold can skip them."""
    spec = get_rule(inputs.rule)
    q, k, v = inputs.q, inputs.k, inputs.v
    errors = []
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeMismatchError("q, k, v must have shape (..., L, d)", [{"field": "q", "error": "rank < 2"}])
    if inputs.length < 1:
        errors.append({"field": "q", "error": "sequence length must be >= 1"})
    if k.shape != q.shape:
        errors.append({"field": "k", "error": f"shape {k.shape} != q shape {q.shape}"})
    if v.shape[:-1] != q.shape[:-1]:
        errors.append({"field": "v", "error": f"leading shape {v.shape[:-1]} != {q.shape[:-1]}"})
    for name, gate in inputs.gates.items():
        if gate.shape[-2] != inputs.length:
            errors.append({"field": name, "error": f"time axis {gate.shape[-2]} != L {inputs.length}"})
    if inputs.S0 is not None and np.shape(inputs.S0)[-2:] != (inputs.d_k, inputs.d_v):
        errors.append({"field": "S0", "error": f"shape {np.shape(inputs.S0)} is not (..., d_k, d_v)"})
    if errors:
        raise ShapeMismatchError(f"invalid sequence inputs for rule '{spec.name}'", errors)
    for name, arr in (("q", q), ("k", k), ("v", v)):
        check_finite(arr, name)
    validate_gates(spec, inputs.gates, inputs.d_k, inputs.d_v)
    return spec


def run_sequential(inputs: SequenceInputs) -> SequenceOutputs:
    """Fold the rule over t = 1…L keeping only the running state."""
    outputs, _ = _fold(inputs, keep_states=False)
    return outputs


def run_sequential_with_states(inputs: SequenceInputs) -> Tuple[SequenceOutputs, np.ndarray]:
    """Same fold, additionally returning every post-update state S_t as (..., L, d_k, d_v)."""
    outputs, states = _fold(inputs, keep_states=True)
    return outputs, states


def _fold(inputs: SequenceInputs, keep_states: bool) -> Tuple[SequenceOutputs, Optional[np.ndarray]]:
    spec = validate_inputs(inputs)
    S = inputs.initial_state()
    L = inputs.length
    O = np.empty(inputs.lanes + (L, inputs.d_v), dtype=DTYPE)
    states: Optional[np.ndarray] = None
    if keep_states:
        states = np.empty(np.broadcast_shapes(S.shape[:-2], inputs.lanes) + (L, inputs.d_k, inputs.d_v),
                          dtype=DTYPE)
    for t in range(L):
        S, O[..., t, :] = step(spec, S, inputs.step_input(t), timestep=t, validate=False)
        if keep_states:
            states[..., t, :, :] = S
    logger.debug(f"sequential scan rule={spec.name} L={L} lanes={inputs.lanes}")
    return SequenceOutputs(O=O, S_final=S), states


def random_inputs(rule, L: int, d_k: int, d_v: Optional[int] = None, rng: Optional[Rng] = None,
                  lanes: Tuple[int, ...] = (), seed: int = 0) -> SequenceInputs:
    """
    Draw a valid random instance for `rule`: L2-normalized keys, Gaussian
    queries/values/S0 and sigmoid-of-Gaussian gates in (0, 1).

    RetNet's decay follows the fixed per-head ladder along the last lane axis.
    """
    spec = get_rule(rule)
    d_v = d_k if d_v is None else d_v
    rng = Rng(seed) if rng is None else rng
    shape = tuple(lanes) + (L,)
    gates = {}
    for name, arity in required_gates(spec).items():
        width = spec.gate_width(arity, d_k)
        if name == "kappa":
            gates[name] = l2_normalize(rng.normal(shape + (width,)))
        elif name == "alpha" and spec.alpha_fixed:
            if lanes:
                gamma = np.array([retnet_gamma(h) for h in range(lanes[-1])], dtype=DTYPE)
                gates[name] = np.broadcast_to(gamma[:, None, None], shape + (1,)).copy()
            else:
                gates[name] = np.full(shape + (1,), retnet_gamma(0), dtype=DTYPE)
        elif name == "alpha":
            gates[name] = sigmoid(rng.normal(shape + (width,), loc=2.0))
        else:
            gates[name] = sigmoid(rng.normal(shape + (width,)))
    return SequenceInputs(
        q=rng.normal(shape + (d_k,)),
        k=l2_normalize(rng.normal(shape + (d_k,))),
        v=rng.normal(shape + (d_v,)),
        gates=Gates(**gates),
        rule=spec.name,
        S0=rng.normal(tuple(lanes) + (d_k, d_v), scale=0.5),
    )
