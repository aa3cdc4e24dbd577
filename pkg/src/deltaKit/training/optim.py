import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from deltaKit.core.exceptions import DomainError
from deltaKit.core.numerics import DTYPE

Parameters = Dict[str, np.ndarray]


class TrainConfig(BaseModel):
    """AdamW with a linear-warmup cosine schedule; the LR range keeps a 10:1 peak/final ratio."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    peak_lr: float = Field(3e-4, gt=0)
    final_lr: float = Field(3e-5, gt=0)
    warmup_steps: int = Field(100, ge=0)
    total_steps: int = Field(1000, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    eval_interval: int = Field(100, ge=1)
    eval_batches: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _schedule(self) -> "TrainConfig":
        if self.final_lr > self.peak_lr:
            raise ValueError(f"final_lr ({self.final_lr}) must not exceed peak_lr ({self.peak_lr})")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")
        return self


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 → peak over the warmup, then cosine decay to final_lr at total_steps."""
    if not 0 <= step <= config.total_steps:
        raise DomainError(f"step {step} outside [0, {config.total_steps}]", [{"field": "step", "error": "range"}])
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span if span > 0 else 1.0
    return config.final_lr + 0.5 * (config.peak_lr - config.final_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: Parameters
    v: Parameters

    @classmethod
    def zeros_like(cls, params: Parameters) -> "AdamState":
        return cls(m={k: np.zeros_like(p, dtype=DTYPE) for k, p in params.items()},
                   v={k: np.zeros_like(p, dtype=DTYPE) for k, p in params.items()})


def global_norm(grads: Parameters) -> float:
    # Fixed key order keeps the reduction deterministic.
    return math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))


def clip_by_global_norm(grads: Parameters, max_norm: Optional[float]) -> Tuple[Parameters, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(params: Parameters, grads: Parameters, moments: AdamState, step: int, config: TrainConfig,
               lr: Optional[float] = None) -> Tuple[Parameters, AdamState]:
    """
    One decoupled-weight-decay Adam update.

    Weight decay multiplies matrices by (1 − lr·wd) before the adaptive step;
    vectors (norm scales, gate biases) are not decayed. `lr` defaults to
    `lr_at(step, config)`.

    Returns:
        (new_params, new_moments); the inputs are left untouched.
    """
    if step < 1:
        raise DomainError("adamw_step: step must be >= 1", [{"field": "step", "error": "must be >= 1"}])
    lr = lr_at(step, config) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * g * g
        if config.weight_decay and p.ndim >= 2:
            p = p * (1.0 - lr * config.weight_decay)
        new_params[name] = p - lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v)
