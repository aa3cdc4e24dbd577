import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm

from deltaKit.core.exceptions import (
    CheckpointConfigMismatchError,
    ConfigError,
    DomainError,
    NonFiniteError,
    TrainingDivergedError,
)
from deltaKit.core.numerics import Rng
from deltaKit.model.config import ModelConfig, parse_config
from deltaKit.model.network import Parameters, forward, init_parameters, loss_and_grad, parameter_shapes
from deltaKit.model.layers import masked_cross_entropy
from deltaKit.training.checkpoint import load_checkpoint, save_checkpoint
from deltaKit.training.optim import AdamState, TrainConfig, adamw_step, clip_by_global_norm, lr_at
from deltaKit.training.tasks import MqarConfig, gen_mqar, last_binding_targets, recall_accuracy

logger = logging.getLogger(__name__)

# Rng stream keys
_DATA_STREAM = 1
_EVAL_STREAM = 2


class RunConfig(BaseModel):
    """The JSON document read by `deltakit train`: model, optimizer and task sections."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "run"
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    task: MqarConfig = MqarConfig()

    @model_validator(mode="after")
    def _task_fits_vocabulary(self) -> "RunConfig":
        if self.task.vocab_size > self.model.vocab_size:
            raise ValueError(f"task vocab_size ({self.task.vocab_size}) exceeds model vocab_size "
                             f"({self.model.vocab_size})")
        return self

    def to_json_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(RunConfig, data, source=path)


@dataclass
class TrainResult:
    params: Parameters
    history: List[Dict[str, Any]] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


@dataclass(frozen=True)
class EvalResult:
    recall: float
    loss: float
    episodes: int
    seq_len: int

    def to_dict(self) -> Dict[str, Any]:
        return {"recall": self.recall, "loss": self.loss, "episodes": self.episodes, "seq_len": self.seq_len}


def evaluate(params: Parameters, model: ModelConfig, task: MqarConfig, seed: int,
             seq_len: Optional[int] = None, batches: int = 1, path: str = "sequential") -> EvalResult:
    """
    Recall on freshly generated episodes from `seed`.

    `seq_len` overrides the task length to measure length extrapolation. Gold labels are
    re-derived with the last-binding scan and must agree with the generator.
    """
    if seq_len is not None:
        task = parse_config(MqarConfig, {**task.model_dump(), "seq_len": seq_len}, source="--seq-len")
    rng = Rng(seed).spawn(_EVAL_STREAM)
    hits, total, loss_sum = 0.0, 0, 0.0
    for b in range(batches):
        batch = gen_mqar(task, rng.spawn(b))
        if not np.array_equal(last_binding_targets(batch.tokens, task), batch.targets):
            raise DomainError("generated gold labels disagree with the last-binding scan")
        logits = forward(batch.tokens, params, model, path).logits
        count = int(batch.mask.sum())
        hits += recall_accuracy(logits, batch.targets) * count
        loss_sum += masked_cross_entropy(logits, batch.targets, batch.mask)[0] * count
        total += count
    return EvalResult(recall=hits / total, loss=loss_sum / total, episodes=batches * task.batch_size,
                      seq_len=task.seq_len)


def _append_metrics(path: Optional[str], record: Dict[str, Any]) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(record, sort_keys=True) + "\n")


def train_loop(run: RunConfig, metrics_path: Optional[str] = None, checkpoint_path: Optional[str] = None,
               progress: bool = False) -> TrainResult:
    """
    Train on MQAR batches drawn per step from the train seed.

    Every `eval_interval` steps (and at the last step) held-out recall is
    measured, one NDJSON record is appended to `metrics_path` and the
    checkpoint is rewritten. A non-finite loss, state or evaluation aborts
    with TrainingDivergedError; the last good checkpoint is left in place.
    The checkpoint path always holds the final parameters on return, also
    for a zero-step run.
    """
    model, train, task = run.model, run.train, run.task
    params = init_parameters(model)
    result = TrainResult(params=params, checkpoint_path=None)
    if metrics_path:
        os.makedirs(os.path.dirname(os.path.abspath(metrics_path)), exist_ok=True)
        open(metrics_path, "w").close()

    moments = AdamState.zeros_like(params)
    data_rng = Rng(train.seed).spawn(_DATA_STREAM)
    interval_losses: List[float] = []
    started = time.perf_counter()
    logger.info(f"Training '{run.name}': rule={model.rule} layers={model.layer_kinds()} "
                f"steps={train.total_steps} batch={task.batch_size} L={task.seq_len}")

    for step in tqdm(range(1, train.total_steps + 1), disable=not progress, desc=run.name):
        batch = gen_mqar(task, data_rng.spawn(step))
        try:
            loss, grads, _ = loss_and_grad(params, model, batch.tokens, batch.targets, batch.mask)
        except NonFiniteError as exc:
            _diverged(f"non-finite values at step {step}: {exc}", step, result.checkpoint_path, exc)
        if not math.isfinite(loss):
            _diverged(f"loss became {loss} at step {step}", step, result.checkpoint_path)
        grads, grad_norm = clip_by_global_norm(grads, train.grad_clip)
        lr = lr_at(step, train)
        params, moments = adamw_step(params, grads, moments, step, train, lr=lr)
        interval_losses.append(loss)

        if step % train.eval_interval == 0 or step == train.total_steps:
            try:
                held_out = evaluate(params, model, task, seed=train.seed + 1, batches=train.eval_batches)
            except NonFiniteError as exc:
                _diverged(f"non-finite values in evaluation at step {step}: {exc}", step,
                          result.checkpoint_path, exc)
            if not math.isfinite(held_out.loss):
                _diverged(f"eval loss became {held_out.loss} at step {step}", step, result.checkpoint_path)
            record = {
                "step": step,
                "loss": float(np.mean(interval_losses)),
                "eval_loss": held_out.loss,
                "recall": held_out.recall,
                "lr": lr,
                "grad_norm": grad_norm,
                "elapsed_s": round(time.perf_counter() - started, 3),
            }
            interval_losses = []
            result.history.append(record)
            _append_metrics(metrics_path, record)
            logger.info(f"step {step}: loss={record['loss']:.4f} recall={held_out.recall:.3f} lr={lr:.2e}")
            if checkpoint_path:
                result.checkpoint_path = save_checkpoint(params, run.to_json_dict(), checkpoint_path)

    result.params = params
    if checkpoint_path and result.checkpoint_path is None:
        result.checkpoint_path = save_checkpoint(params, run.to_json_dict(), checkpoint_path)
    return result


def _diverged(message: str, step: int, last_good_path: Optional[str],
              cause: Optional[Exception] = None) -> None:
    logger.error(f"{message}; last good checkpoint: {last_good_path}")
    raise TrainingDivergedError(message, step, last_good_path) from cause


def load_trained(path: str) -> Tuple[Parameters, RunConfig]:
    """Parameters and run config from a checkpoint written by `train_loop`."""
    params, config = load_checkpoint(path)
    run = parse_config(RunConfig, config, source=path)
    expected = parameter_shapes(run.model)
    mismatched = [{"field": name, "error": f"shape {params[name].shape if name in params else None} != {shape}"}
                  for name, shape in expected.items() if name not in params or params[name].shape != shape]
    if mismatched or len(params) != len(expected):
        raise CheckpointConfigMismatchError(f"tensors in {path} do not match its model config", mismatched)
    return params, run
