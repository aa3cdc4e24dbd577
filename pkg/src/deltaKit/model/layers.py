"""
Forward/backward pairs for the model's building blocks.

Each `*_forward` returns (output, cache) and the matching `*_backward` takes
the upstream gradient and that cache. Parameter gradients are summed over all
leading (batch, position) axes.
"""
from typing import Dict, Optional, Tuple

import numpy as np

from deltaKit.core.exceptions import DomainError
from deltaKit.core.numerics import DTYPE, elementwise, elementwise_derivative, log_softmax, softmax

RMS_EPS = 1e-6
KEY_NORM_EPS = 1e-12


def _flat_outer(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Σ over leading axes of x ⊗ dy, i.e. the weight gradient of y = x @ W."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def linear_forward(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Tuple]:
    y = x @ W
    if b is not None:
        y = y + b
    return y, (x, W, b is not None)


def linear_backward(dy: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    x, W, has_bias = cache
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0) if has_bias else None
    return dy @ W.T, _flat_outer(x, dy), db


def rmsnorm_forward(x: np.ndarray, scale: np.ndarray, eps: float = RMS_EPS) -> Tuple[np.ndarray, Tuple]:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * scale, (x, r, scale)


def rmsnorm_backward(dy: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray]:
    x, r, scale = cache
    dscale = (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = dy * scale
    dx = r * (dxhat - x * r * r * np.mean(dxhat * x, axis=-1, keepdims=True))
    return dx, dscale


def l2norm_forward(x: np.ndarray, eps: float = KEY_NORM_EPS) -> Tuple[np.ndarray, Tuple]:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    return y, (y, denom, norm >= eps)


def l2norm_backward(dy: np.ndarray, cache: Tuple) -> np.ndarray:
    y, denom, active = cache
    projected = dy - y * np.sum(y * dy, axis=-1, keepdims=True)
    return np.where(active, projected, dy) / denom


def sigmoid_backward(dg: np.ndarray, g: np.ndarray) -> np.ndarray:
    return dg * g * (1.0 - g)


def swiglu_forward(x: np.ndarray, W_gate: np.ndarray, W_up: np.ndarray,
                   W_down: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    """W_down(silu(W_gate x) ⊙ (W_up x))."""
    g = x @ W_gate
    u = x @ W_up
    act = elementwise("silu", g)
    hidden = act * u
    return hidden @ W_down, (x, g, u, act, hidden, W_gate, W_up, W_down)


def swiglu_backward(dy: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    x, g, u, act, hidden, W_gate, W_up, W_down = cache
    dhidden = dy @ W_down.T
    du = dhidden * act
    dg = dhidden * u * elementwise_derivative("silu", g)
    dx = dg @ W_gate.T + du @ W_up.T
    return dx, {"W_gate": _flat_outer(x, dg), "W_up": _flat_outer(x, du), "W_down": _flat_outer(hidden, dy)}


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(B, L, H·w) -> (B, H, L, w)."""
    B, L, width = x.shape
    return x.reshape(B, L, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(B, H, L, w) -> (B, L, H·w)."""
    B, H, L, w = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * w)


def causal_attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    """Causal softmax attention on (B, H, L, d) heads, scaled by 1/√d, no positional encoding."""
    L, d = q.shape[-2], q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    mask = np.tril(np.ones((L, L), dtype=bool))
    probs = softmax(np.where(mask, scores, -np.inf))
    return probs @ v, (q, k, v, probs, scale)


def causal_attention_backward(dout: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    q, k, v, probs, scale = cache
    dprobs = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(probs, -1, -2) @ dout
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
    return dscores @ k, np.swapaxes(dscores, -1, -2) @ q, dv


def masked_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                         mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy over positions where `mask` is set.

    Returns:
        (loss, dlogits)
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise DomainError("cross-entropy mask selects no positions", [{"field": "mask", "error": "empty"}])
    safe_targets = np.where(mask, targets, 0)[..., None]
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, safe_targets, axis=-1)[..., 0]
    loss = -float(np.sum(np.where(mask, picked, 0.0))) / count
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, safe_targets, np.take_along_axis(dlogits, safe_targets, axis=-1) - 1.0, axis=-1)
    dlogits = np.where(mask[..., None], dlogits, 0.0) / count
    return loss, dlogits.astype(DTYPE)
