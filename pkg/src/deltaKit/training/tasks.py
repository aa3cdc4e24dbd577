"""
Multi-query associative recall (MQAR) episodes.

Vocabulary layout: 0 is padding, 1 is the query marker, the next
`key_symbols` ids are keys and the rest are values. An episode binds keys to
values in its first segment (k v pairs, followed by rebinding pairs when
overwriting is allowed) and asks queries in the second segment as
[MARKER, key] slots; the target sits on the key position and is the key's
latest binding.
"""
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from deltaKit.core.exceptions import DomainError
from deltaKit.core.numerics import Rng

logger = logging.getLogger(__name__)

PAD = 0
QUERY_MARKER = 1
IGNORE = -1
FIRST_KEY = 2


class MqarConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_kv_pairs: int = Field(8, ge=1)
    num_queries: Optional[int] = Field(None, ge=1)
    vocab_size: int = Field(64, ge=4)
    key_symbols: Optional[int] = Field(None, ge=1)
    seq_len: int = Field(128, ge=2)
    batch_size: int = Field(32, ge=1)
    allow_overwrite: bool = False
    num_rebinds: int = Field(1, ge=1)

    @property
    def queries(self) -> int:
        return self.num_kv_pairs if self.num_queries is None else self.num_queries

    @property
    def n_keys(self) -> int:
        return (self.vocab_size - FIRST_KEY) // 2 if self.key_symbols is None else self.key_symbols

    @property
    def first_value(self) -> int:
        return FIRST_KEY + self.n_keys

    @property
    def n_values(self) -> int:
        return self.vocab_size - self.first_value

    @property
    def rebinds(self) -> int:
        return min(self.num_rebinds, self.num_kv_pairs) if self.allow_overwrite else 0

    @property
    def pair_segment(self) -> int:
        return 2 * (self.num_kv_pairs + self.rebinds)

    @model_validator(mode="after")
    def _fits(self) -> "MqarConfig":
        if self.n_keys < self.num_kv_pairs:
            raise ValueError(f"key alphabet ({self.n_keys}) smaller than num_kv_pairs ({self.num_kv_pairs})")
        if self.n_values < 2:
            raise ValueError(f"value alphabet too small ({self.n_values}); need at least 2 symbols")
        if self.pair_segment + 2 * self.queries > self.seq_len:
            raise ValueError(f"seq_len {self.seq_len} cannot hold {self.num_kv_pairs} pairs, "
                             f"{self.rebinds} rebinds and {self.queries} queries")
        return self

    def is_key(self, token) -> np.ndarray:
        return (np.asarray(token) >= FIRST_KEY) & (np.asarray(token) < self.first_value)

    def is_value(self, token) -> np.ndarray:
        return np.asarray(token) >= self.first_value


@dataclass(frozen=True)
class MqarEpisode:
    tokens: np.ndarray
    targets: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.targets != IGNORE


@dataclass(frozen=True)
class MqarBatch:
    tokens: np.ndarray   # (B, L) int64
    targets: np.ndarray  # (B, L) int64, IGNORE outside query answers

    @property
    def mask(self) -> np.ndarray:
        return self.targets != IGNORE

    def episodes(self) -> Iterator[MqarEpisode]:
        for tokens, targets in zip(self.tokens, self.targets):
            yield MqarEpisode(tokens, targets)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def gen_episode(config: MqarConfig, rng: Rng) -> MqarEpisode:
    L = config.seq_len
    tokens = np.full(L, PAD, dtype=np.int64)
    targets = np.full(L, IGNORE, dtype=np.int64)

    keys = FIRST_KEY + rng.choice(config.n_keys, size=config.num_kv_pairs, replace=False)
    values = config.first_value + rng.integers(0, config.n_values, size=config.num_kv_pairs)
    binding = dict(zip(keys.tolist(), values.tolist()))
    pairs = list(zip(keys.tolist(), values.tolist()))

    rebound = []
    if config.rebinds:
        for idx in rng.choice(config.num_kv_pairs, size=config.rebinds, replace=False).tolist():
            key = int(keys[idx])
            shift = int(rng.integers(1, config.n_values))
            new_value = config.first_value + (binding[key] - config.first_value + shift) % config.n_values
            binding[key] = new_value
            pairs.append((key, new_value))
            rebound.append(key)

    for i, (key, value) in enumerate(pairs):
        tokens[2 * i] = key
        tokens[2 * i + 1] = value

    # Rebound keys are always queried so every overwrite is tested.
    extra = config.queries - len(rebound)
    query_keys = rebound[:config.queries]
    if extra > 0:
        query_keys += rng.choice(keys, size=extra, replace=extra > config.num_kv_pairs).tolist()
    query_keys = [query_keys[i] for i in rng.permutation(len(query_keys)).tolist()]

    slots = (L - config.pair_segment) // 2
    positions = np.sort(rng.choice(slots, size=len(query_keys), replace=False))
    for slot, key in zip(positions.tolist(), query_keys):
        at = config.pair_segment + 2 * slot
        tokens[at] = QUERY_MARKER
        tokens[at + 1] = key
        targets[at + 1] = binding[key]
    return MqarEpisode(tokens, targets)


def gen_mqar(config: MqarConfig, rng: Rng, batch_size: Optional[int] = None) -> MqarBatch:
    """A batch of episodes; episode b draws from `rng.spawn(b)` so it does not depend on the others."""
    size = config.batch_size if batch_size is None else batch_size
    episodes = [gen_episode(config, rng.spawn(b)) for b in range(size)]
    return MqarBatch(tokens=np.stack([e.tokens for e in episodes]),
                     targets=np.stack([e.targets for e in episodes]))


def last_binding_targets(tokens: np.ndarray, config: MqarConfig) -> np.ndarray:
    """
    Brute-force gold labels: scan left to right, bind every (key, value)
    bigram and answer each [MARKER, key] with the key's binding at that point.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        return np.stack([last_binding_targets(row, config) for row in tokens])
    targets = np.full(tokens.shape, IGNORE, dtype=np.int64)
    binding = {}
    t = 0
    while t < len(tokens) - 1:
        token, nxt = int(tokens[t]), int(tokens[t + 1])
        if token == QUERY_MARKER and config.is_key(nxt):
            if nxt in binding:
                targets[t + 1] = binding[nxt]
            t += 2
        elif config.is_key(token) and config.is_value(nxt):
            binding[token] = nxt
            t += 2
        else:
            t += 1
    return targets


def recall_accuracy(logits: np.ndarray, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Exact-match fraction of argmax predictions at the masked (query) positions."""
    targets = np.asarray(targets)
    mask = targets != IGNORE if mask is None else np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise DomainError(f"logits {logits.shape} do not match targets {targets.shape}",
                          [{"field": "logits", "error": "shape mismatch"}])
    if not mask.any():
        raise DomainError("recall_accuracy: mask selects no positions", [{"field": "mask", "error": "empty"}])
    predictions = np.argmax(logits, axis=-1)
    return float(np.mean(predictions[mask] == targets[mask]))
