from typing import List, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from deltaKit.core.exceptions import ConfigError
from deltaKit.core.rules import RULE_NAMES, get_rule

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class ModelConfig(BaseModel):
    """
    Shape of the toy hybrid model.

    `hybrid_ratio` counts linear-attention layers per softmax-attention layer:
    layer k (1-indexed) is softmax attention iff k mod (hybrid_ratio + 1) == 0.
    A ratio of 0 gives a pure linear-attention stack.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_size: int = Field(64, ge=2)
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    head_dim: int = Field(32, ge=1)
    hybrid_ratio: int = Field(0, ge=0)
    rule: str = "fg2gdn"
    mlp_mult: int = Field(2, ge=1)
    chunk_size: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)

    @field_validator("rule")
    @classmethod
    def _known_rule(cls, value: str) -> str:
        if value not in RULE_NAMES:
            raise ValueError(f"unknown rule '{value}'; valid rules: {', '.join(RULE_NAMES)}")
        return value

    @model_validator(mode="after")
    def _heads_cover_width(self) -> "ModelConfig":
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(f"d_model ({self.d_model}) must equal n_heads × head_dim "
                             f"({self.n_heads} × {self.head_dim})")
        return self

    @property
    def spec(self):
        return get_rule(self.rule)

    @property
    def mlp_width(self) -> int:
        return self.mlp_mult * self.d_model

    def is_attention_layer(self, index: int) -> bool:
        """`index` is 0-based."""
        return self.hybrid_ratio > 0 and (index + 1) % (self.hybrid_ratio + 1) == 0

    def layer_kinds(self) -> List[str]:
        return ["attention" if self.is_attention_layer(i) else "linear" for i in range(self.n_layers)]


def parse_config(cls: Type[ConfigT], data, source: str = "config") -> ConfigT:
    """Validate a mapping into `cls`, surfacing pydantic errors as ConfigError."""
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        errors = [{"field": ".".join(str(p) for p in err["loc"]) or "__root__", "error": err["msg"]}
                  for err in exc.errors()]
        raise ConfigError(f"invalid {cls.__name__} in {source}", errors) from exc
