"""
Toy hybrid language model with hand-written forward and backward passes.

Token embedding, pre-norm residual blocks whose mixer is a linear-attention
layer running one of the registered update rules (or, every
(hybrid_ratio + 1)-th layer, causal softmax attention), a SwiGLU MLP, a final
RMS norm and an output head tied to the embedding. Parameters are a flat
name -> float64 array mapping so that the optimizer and the checkpoint store
can treat them uniformly.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from deltaKit.core.chunkwise import run_chunkwise
from deltaKit.core.exceptions import ConfigError, DomainError
from deltaKit.core.grad import GradCheckReport, backward_sequential
from deltaKit.core.numerics import DTYPE, Rng, logit, sigmoid
from deltaKit.core.rules import NONE, Gates, retnet_gamma
from deltaKit.core.scan import SequenceInputs, run_sequential_with_states
from deltaKit.model.config import ModelConfig
from deltaKit.model.layers import (
    causal_attention_backward,
    causal_attention_forward,
    l2norm_backward,
    l2norm_forward,
    linear_backward,
    linear_forward,
    masked_cross_entropy,
    merge_heads,
    rmsnorm_backward,
    rmsnorm_forward,
    sigmoid_backward,
    split_heads,
    swiglu_backward,
    swiglu_forward,
)

logger = logging.getLogger(__name__)

Parameters = Dict[str, np.ndarray]

MIXER_PATHS = ("sequential", "chunkwise")
ALPHA_INIT = 0.95
BETA_INIT = 0.5
EMBED_STD = 0.02

_GATE_BIAS_INIT = {"alpha": ALPHA_INIT, "beta": BETA_INIT, "beta_v": BETA_INIT}


def _name(layer: int, param: str) -> str:
    return f"layers.{layer}.{param}"


def gate_layout(config: ModelConfig) -> Dict[str, int]:
    """Per-head width of every learned sigmoid gate of a linear-attention layer."""
    spec = config.spec
    layout = {}
    if spec.alpha != NONE and not spec.alpha_fixed:
        layout["alpha"] = spec.gate_width(spec.alpha, config.head_dim)
    if spec.beta != NONE:
        layout["beta"] = spec.gate_width(spec.beta, config.head_dim)
    if spec.beta_v:
        layout["beta_v"] = config.head_dim
    return layout


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map; the order fixes initialization streams and checkpoint layout."""
    d, H, m = config.d_model, config.n_heads, config.mlp_width
    shapes: Dict[str, Tuple[int, ...]] = {"embedding": (config.vocab_size, d)}
    for i in range(config.n_layers):
        shapes[_name(i, "norm_mixer")] = (d,)
        for proj in ("W_q", "W_k", "W_v", "W_o"):
            shapes[_name(i, proj)] = (d, d)
        if not config.is_attention_layer(i):
            for gate, width in gate_layout(config).items():
                shapes[_name(i, f"W_{gate}")] = (d, H * width)
                shapes[_name(i, f"b_{gate}")] = (H * width,)
            if config.spec.kappa:
                shapes[_name(i, "W_kappa")] = (d, d)
        shapes[_name(i, "norm_mlp")] = (d,)
        shapes[_name(i, "W_gate")] = (d, m)
        shapes[_name(i, "W_up")] = (d, m)
        shapes[_name(i, "W_down")] = (m, d)
    shapes["norm_final"] = (d,)
    return shapes


def init_parameters(config: ModelConfig) -> Parameters:
    """
    Deterministic initialization from `config.seed`.

    Projections are N(0, 1/fan_in); norm scales are 1; the embedding is
    N(0, EMBED_STD²); gate biases put sigmoid(b) at α = 0.95 and β = 0.5.
    """
    rng = Rng(config.seed)
    params: Parameters = {}
    for index, (name, shape) in enumerate(parameter_shapes(config).items()):
        leaf = name.rsplit(".", 1)[-1]
        stream = rng.spawn(index)
        if leaf.startswith("norm"):
            params[name] = np.ones(shape, dtype=DTYPE)
        elif leaf == "embedding":
            params[name] = stream.normal(shape, scale=EMBED_STD)
        elif leaf.startswith("b_"):
            params[name] = np.full(shape, float(logit(_GATE_BIAS_INIT[leaf[2:]])), dtype=DTYPE)
        else:
            params[name] = stream.normal(shape, scale=1.0 / np.sqrt(shape[0]))
    logger.debug(f"initialized {len(params)} tensors ({count_parameters(params)} values) seed={config.seed}")
    return params


def count_parameters(params: Parameters) -> int:
    return int(sum(p.size for p in params.values()))


# ===== Gates =====
def compute_gates(x: np.ndarray, params: Parameters, layer: int, config: ModelConfig) -> Tuple[Gates, Dict]:
    """
    Gates for token features x of shape (..., d_model), laid out as (..., H, w).

    Learned gates are sigmoid(x W + b), one per head for scalar-gate rules and
    one per head channel for vector-gate rules. RetNet's decay is the fixed
    per-head ladder; RWKV-7's κ̂ is a per-head L2-normalized projection.
    """
    spec = config.spec
    H, dh = config.n_heads, config.head_dim
    lead = x.shape[:-1]
    values, cache = {}, {}
    for gate, width in gate_layout(config).items():
        z, lin = linear_forward(x, params[_name(layer, f"W_{gate}")], params[_name(layer, f"b_{gate}")])
        g = sigmoid(z).reshape(lead + (H, width))
        values[gate] = g
        cache[gate] = (g, lin)
    if spec.alpha_fixed:
        gamma = np.array([retnet_gamma(h) for h in range(H)], dtype=DTYPE)[:, None]
        values["alpha"] = np.broadcast_to(gamma, lead + (H, 1))
    if spec.kappa:
        z, lin = linear_forward(x, params[_name(layer, "W_kappa")])
        kappa, norm_cache = l2norm_forward(z.reshape(lead + (H, dh)))
        values["kappa"] = kappa
        cache["kappa"] = (norm_cache, lin)
    return Gates(**values), cache


def _gates_backward(dgates: Gates, cache: Dict, params: Parameters, layer: int,
                    grads: Parameters) -> np.ndarray:
    """Accumulate gate-projection gradients into `grads`; returns dx."""
    dx = 0.0
    for gate, (saved, lin) in cache.items():
        upstream = _swap_head_axis(getattr(dgates, gate))
        if gate == "kappa":
            dz = l2norm_backward(upstream, saved)
        else:
            dz = sigmoid_backward(upstream, saved)
        ddx, dW, db = linear_backward(dz.reshape(dz.shape[:-2] + (-1,)), lin)
        grads[_name(layer, f"W_{gate}")] = dW
        if db is not None:
            grads[_name(layer, f"b_{gate}")] = db
        dx = dx + ddx
    return dx


def _swap_head_axis(arr: np.ndarray) -> np.ndarray:
    """(B, L, H, w) <-> (B, H, L, w)."""
    return np.swapaxes(arr, -3, -2)


# ===== Mixers =====
def linear_attention_block(X: np.ndarray, params: Parameters, layer: int, config: ModelConfig,
                           path: str = "sequential") -> Tuple[np.ndarray, Dict]:
    """
    Multi-head linear attention over X of shape (B, L, d_model).

    Keys are L2-normalized per head before entering the rule; the sequential
    path caches every state for the backward pass, the chunkwise path is
    forward-only.
    """
    if path not in MIXER_PATHS:
        raise ConfigError(f"unknown mixer path '{path}'; expected one of {MIXER_PATHS}",
                          [{"field": "path", "error": "unknown"}])
    H = config.n_heads
    q_lin, cq = linear_forward(X, params[_name(layer, "W_q")])
    k_lin, ck = linear_forward(X, params[_name(layer, "W_k")])
    v_lin, cv = linear_forward(X, params[_name(layer, "W_v")])
    k, norm_cache = l2norm_forward(split_heads(k_lin, H))
    gates, gate_cache = compute_gates(X, params, layer, config)
    inputs = SequenceInputs(
        q=split_heads(q_lin, H), k=k, v=split_heads(v_lin, H),
        gates=Gates(**{name: _swap_head_axis(g) for name, g in gates.items()}),
        rule=config.rule,
    )
    if path == "sequential":
        outputs, states = run_sequential_with_states(inputs)
    else:
        outputs, _ = run_chunkwise(inputs, min(config.chunk_size, inputs.length))
        states = None
    Y, co = linear_forward(merge_heads(outputs.O), params[_name(layer, "W_o")])
    cache = {"kind": "linear", "inputs": inputs, "states": states, "norm": norm_cache,
             "gates": gate_cache, "proj": (cq, ck, cv, co)}
    return Y, cache


def linear_attention_backward(dY: np.ndarray, cache: Dict, params: Parameters, layer: int,
                              config: ModelConfig, grads: Parameters) -> np.ndarray:
    cq, ck, cv, co = cache["proj"]
    dmerged, grads[_name(layer, "W_o")], _ = linear_backward(dY, co)
    seq = backward_sequential(cache["inputs"], split_heads(dmerged, config.n_heads), None,
                              states=cache["states"])
    dX, grads[_name(layer, "W_q")], _ = linear_backward(merge_heads(seq.dq), cq)
    dXk, grads[_name(layer, "W_k")], _ = linear_backward(merge_heads(l2norm_backward(seq.dk, cache["norm"])), ck)
    dXv, grads[_name(layer, "W_v")], _ = linear_backward(merge_heads(seq.dv), cv)
    return dX + dXk + dXv + _gates_backward(seq.dgates, cache["gates"], params, layer, grads)


def softmax_attention_block(X: np.ndarray, params: Parameters, layer: int,
                            config: ModelConfig) -> Tuple[np.ndarray, Dict]:
    """Causal multi-head softmax attention without positional encoding."""
    H = config.n_heads
    q, cq = linear_forward(X, params[_name(layer, "W_q")])
    k, ck = linear_forward(X, params[_name(layer, "W_k")])
    v, cv = linear_forward(X, params[_name(layer, "W_v")])
    out, attn = causal_attention_forward(split_heads(q, H), split_heads(k, H), split_heads(v, H))
    Y, co = linear_forward(merge_heads(out), params[_name(layer, "W_o")])
    return Y, {"kind": "attention", "attn": attn, "proj": (cq, ck, cv, co)}


def softmax_attention_backward(dY: np.ndarray, cache: Dict, params: Parameters, layer: int,
                               config: ModelConfig, grads: Parameters) -> np.ndarray:
    cq, ck, cv, co = cache["proj"]
    dmerged, grads[_name(layer, "W_o")], _ = linear_backward(dY, co)
    dq, dk, dv = causal_attention_backward(split_heads(dmerged, config.n_heads), cache["attn"])
    dX, grads[_name(layer, "W_q")], _ = linear_backward(merge_heads(dq), cq)
    dXk, grads[_name(layer, "W_k")], _ = linear_backward(merge_heads(dk), ck)
    dXv, grads[_name(layer, "W_v")], _ = linear_backward(merge_heads(dv), cv)
    return dX + dXk + dXv


def swiglu_mlp(x: np.ndarray, params: Parameters, layer: int) -> Tuple[np.ndarray, Tuple]:
    return swiglu_forward(x, params[_name(layer, "W_gate")], params[_name(layer, "W_up")],
                          params[_name(layer, "W_down")])


# ===== Full model =====
@dataclass
class ForwardTrace:
    logits: np.ndarray
    tokens: np.ndarray
    layers: List[Dict] = field(default_factory=list)
    final: Optional[Tuple] = None
    unbatched: bool = False


def forward(tokens: np.ndarray, params: Parameters, config: ModelConfig,
            path: str = "sequential") -> ForwardTrace:
    """
    Logits for token ids of shape (L,) or (B, L).

    Returns a ForwardTrace whose logits have shape (..., L, vocab_size) and
    whose caches feed `backward`.
    """
    tokens = np.asarray(tokens)
    unbatched = tokens.ndim == 1
    batch = tokens[None, :] if unbatched else tokens
    if batch.ndim != 2 or batch.shape[1] < 1:
        raise DomainError(f"tokens must have shape (L,) or (B, L) with L >= 1, got {tokens.shape}",
                          [{"field": "tokens", "error": "bad shape"}])
    if np.any(batch < 0) or np.any(batch >= config.vocab_size):
        raise DomainError(f"token id out of range [0, {config.vocab_size})",
                          [{"field": "tokens", "error": "id out of range"}])

    E = params["embedding"]
    h = E[batch]
    caches = []
    for i in range(config.n_layers):
        normed, norm_mixer = rmsnorm_forward(h, params[_name(i, "norm_mixer")])
        if config.is_attention_layer(i):
            mixed, mixer = softmax_attention_block(normed, params, i, config)
        else:
            mixed, mixer = linear_attention_block(normed, params, i, config, path)
        h = h + mixed
        normed, norm_mlp = rmsnorm_forward(h, params[_name(i, "norm_mlp")])
        ffn, mlp = swiglu_mlp(normed, params, i)
        h = h + ffn
        caches.append({"norm_mixer": norm_mixer, "mixer": mixer, "norm_mlp": norm_mlp, "mlp": mlp})
    out, final_norm = rmsnorm_forward(h, params["norm_final"])
    logits = out @ E.T
    if unbatched:
        logits = logits[0]
    return ForwardTrace(logits=logits, tokens=batch, layers=caches, final=(final_norm, out),
                        unbatched=unbatched)


def backward(trace: ForwardTrace, dlogits: np.ndarray, params: Parameters, config: ModelConfig) -> Parameters:
    """Gradients of Σ dlogits ⊙ logits with respect to every parameter."""
    dlogits = np.asarray(dlogits, dtype=DTYPE)
    if trace.unbatched:
        dlogits = dlogits[None]
    E = params["embedding"]
    final_norm, out = trace.final
    grads: Parameters = {}

    dE = dlogits.reshape(-1, dlogits.shape[-1]).T @ out.reshape(-1, out.shape[-1])
    dh, grads["norm_final"] = rmsnorm_backward(dlogits @ E, final_norm)
    for i in range(config.n_layers - 1, -1, -1):
        cache = trace.layers[i]
        dffn, mlp_grads = swiglu_backward(dh, cache["mlp"])
        for leaf, grad in mlp_grads.items():
            grads[_name(i, leaf)] = grad
        dnorm, grads[_name(i, "norm_mlp")] = rmsnorm_backward(dffn, cache["norm_mlp"])
        dh = dh + dnorm
        if cache["mixer"]["kind"] == "attention":
            dmix = softmax_attention_backward(dh, cache["mixer"], params, i, config, grads)
        else:
            dmix = linear_attention_backward(dh, cache["mixer"], params, i, config, grads)
        dnorm, grads[_name(i, "norm_mixer")] = rmsnorm_backward(dmix, cache["norm_mixer"])
        dh = dh + dnorm
    np.add.at(dE, trace.tokens, dh)
    grads["embedding"] = dE
    return {name: grads[name] for name in params}


def loss_and_grad(params: Parameters, config: ModelConfig, tokens: np.ndarray, targets: np.ndarray,
                  mask: np.ndarray, path: str = "sequential") -> Tuple[float, Parameters, ForwardTrace]:
    """Mean cross-entropy over masked positions, its parameter gradients and the trace."""
    trace = forward(tokens, params, config, path)
    loss, dlogits = masked_cross_entropy(trace.logits, targets, mask)
    return loss, backward(trace, dlogits, params, config), trace


def loss_value(params: Parameters, config: ModelConfig, tokens: np.ndarray, targets: np.ndarray,
               mask: np.ndarray, path: str = "sequential") -> float:
    loss, _ = masked_cross_entropy(forward(tokens, params, config, path).logits, targets, mask)
    return loss


def gradcheck_model(params: Parameters, config: ModelConfig, tokens: np.ndarray, targets: np.ndarray,
                    mask: np.ndarray, h: float = 1e-5, tol: float = 1e-4, samples_per_tensor: int = 6,
                    seed: int = 0) -> GradCheckReport:
    """Central-difference check of `loss_and_grad` on a seeded sample of coordinates per tensor."""
    _, grads, _ = loss_and_grad(params, config, tokens, targets, mask)
    report = GradCheckReport(tol=tol, label=f"model:{config.rule}")
    rng = Rng(seed)
    for index, (name, value) in enumerate(params.items()):
        picks = rng.spawn(index).choice(value.size, size=min(samples_per_tensor, value.size), replace=False)
        for flat in np.sort(picks):
            coord = np.unravel_index(int(flat), value.shape)
            original = value[coord]
            estimates = []
            for delta in (h, -h):
                perturbed = dict(params)
                perturbed[name] = value.copy()
                perturbed[name][coord] = original + delta
                estimates.append(loss_value(perturbed, config, tokens, targets, mask))
            report.record(name, coord, grads[name][coord], (estimates[0] - estimates[1]) / (2.0 * h))
    logger.debug(f"model gradcheck max_rel_error={report.max_rel_error:.3e} checked={report.checked}")
    return report
